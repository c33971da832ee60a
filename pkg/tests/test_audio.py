"""WAV の読み書きとリサンプリングのテスト"""

import struct

import numpy as np
import pytest

from samplecnn.audio import (
    Waveform,
    WavEncoding,
    WavFormatError,
    decode_wav,
    encode_wav,
    read_wav,
    resample,
    resampled_length,
    write_wav,
)


def _wav(
    payload, *, tag=1, channels=1, rate=16000, bits=16, size=None, extra_chunks=b"", block_align=None
):
    """任意のヘッダを持つ WAV バイト列"""
    if block_align is None:
        block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block_align, block_align, bits)
    data_size = len(payload) if size is None else size
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + extra_chunks
    chunks += b"data" + struct.pack("<I", data_size) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


# Waveform のテスト


def test_waveform_casts_to_float32():
    """サンプルは float32 の 1 次元配列になる"""
    w = Waveform(np.array([0.0, 0.5]), 8000)
    assert w.samples.dtype == np.float32
    assert len(w) == 2
    assert w.duration == pytest.approx(2 / 8000)


def test_waveform_rejects_non_finite():
    """NaN を含む波形は作れない"""
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)


def test_waveform_rejects_bad_rate():
    """sample_rate は正"""
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)


def test_waveform_rejects_2d():
    """多次元の配列は受け付けない"""
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 4)), 16000)


# decode_wav のテスト


def test_decode_pcm16_scaling():
    """16-bit の 16384 は 0.5"""
    w = decode_wav(_wav(struct.pack("<hh", 16384, -32768)))
    np.testing.assert_array_equal(w.samples, [0.5, -1.0])
    assert w.sample_rate == 16000


def test_decode_stereo_float_is_channel_mean():
    """ステレオのフレーム (0.2, 0.4) はモノラル 0.3"""
    payload = np.array([0.2, 0.4, -1.0, 1.0], dtype="<f4").tobytes()
    w = decode_wav(_wav(payload, tag=3, channels=2, bits=32, rate=44100))
    np.testing.assert_allclose(w.samples, [0.3, 0.0], atol=1e-7)
    assert w.sample_rate == 44100


def test_decode_truncated_data_chunk():
    """ヘッダ 1000 フレームに対して実データ 900 フレームはエラー"""
    payload = np.zeros(900, dtype="<i2").tobytes()
    with pytest.raises(WavFormatError, match="truncated data chunk"):
        decode_wav(_wav(payload, size=2000))


def test_decode_partial_frame_is_truncated():
    """フレーム長で割り切れない data チャンクはエラー"""
    with pytest.raises(WavFormatError, match="truncated data chunk"):
        decode_wav(_wav(b"\x00\x00\x00", channels=1))


def test_decode_unsupported_format_names_tag():
    """圧縮フォーマットはフォーマットタグを含むエラー"""
    with pytest.raises(WavFormatError, match="0x0055"):
        decode_wav(_wav(b"\x00\x00", tag=0x55, bits=16))


def test_decode_pcm24_is_unsupported():
    """24-bit PCM は対応しない"""
    with pytest.raises(WavFormatError, match="24 bit"):
        decode_wav(_wav(b"\x00" * 6, bits=24))


def test_decode_adpcm_names_tag_not_truncation():
    """フレーム長の倍数でない圧縮データでもフォーマットタグのエラーになる"""
    data = _wav(b"\x00" * 300, tag=0x11, bits=4, block_align=256)
    with pytest.raises(WavFormatError, match="0x0011"):
        decode_wav(data)


def test_decode_zero_block_align_is_format_error():
    """block_align が 0 の MP3 入り WAV は ZeroDivisionError でなく WavFormatError"""
    with pytest.raises(WavFormatError, match="0x0055"):
        decode_wav(_wav(b"\xff" * 417, tag=0x55, bits=0, block_align=0))


def test_decode_mismatched_block_align():
    """PCM16 で block_align がチャネル数と合わなければエラー"""
    with pytest.raises(WavFormatError, match="block_align"):
        decode_wav(_wav(b"\x00" * 12, channels=1, block_align=4))


def test_decode_extensible_pcm():
    """WAVE_FORMAT_EXTENSIBLE のサブフォーマット PCM"""
    fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 8000, 16000, 2, 16)
    fmt += struct.pack("<HHI", 22, 16, 4) + struct.pack("<H", 1) + b"\x00" * 14
    payload = struct.pack("<h", 8192)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    data = b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks
    np.testing.assert_array_equal(decode_wav(data).samples, [0.25])


def test_decode_skips_odd_sized_chunk():
    """奇数長のチャンクはパディング 1 バイトを読み飛ばす"""
    extra = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\x00"
    w = decode_wav(_wav(struct.pack("<h", -16384), extra_chunks=extra))
    np.testing.assert_array_equal(w.samples, [-0.5])


def test_decode_not_riff():
    """RIFF/WAVE でなければエラー"""
    with pytest.raises(WavFormatError):
        decode_wav(b"ID3\x03" + b"\x00" * 40)


def test_decode_too_many_channels():
    """3 チャネル以上はエラー"""
    with pytest.raises(WavFormatError):
        decode_wav(_wav(b"\x00" * 6, channels=3))


def test_decode_missing_data_chunk():
    """data チャンクがなければエラー"""
    fmt = struct.pack("<HHIIHH", 1, 1, 16000, 32000, 2, 16)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    with pytest.raises(WavFormatError, match="data"):
        decode_wav(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


def test_read_wav_error_names_path(tmp_path):
    """ファイルから読むときのエラーはパスを含む"""
    path = tmp_path / "broken.wav"
    path.write_bytes(b"not a wav file")
    with pytest.raises(WavFormatError, match="broken.wav"):
        read_wav(path)


# encode_wav のテスト


def test_pcm16_roundtrip_within_one_step(tmp_path, rng):
    """PCM16 で書いて読むと 1/32768 以内で元に戻る"""
    samples = rng.uniform(-1, 1, size=1000).astype(np.float32)
    path = tmp_path / "a.wav"
    write_wav(path, Waveform(samples, 22050))
    w = read_wav(path)
    assert w.sample_rate == 22050
    assert np.max(np.abs(w.samples - samples)) <= 1 / 32768


def test_float32_roundtrip_is_exact(rng):
    """float32 で書いたものはビット単位で戻る"""
    samples = rng.normal(size=257).astype(np.float32)
    w = decode_wav(encode_wav(Waveform(samples, 16000), WavEncoding.FLOAT32))
    np.testing.assert_array_equal(w.samples, samples)


def test_pcm16_clips_out_of_range():
    """PCM16 は [-1, 1] にクリップする"""
    w = decode_wav(encode_wav(Waveform(np.array([1.5, -2.0]), 16000), "pcm16"))
    np.testing.assert_array_equal(w.samples, [32767 / 32768, -1.0])


# resample のテスト


def test_resample_same_rate_is_identity(rng):
    """同じレートならビット単位で同じ"""
    w = Waveform(rng.normal(size=100).astype(np.float32), 16000)
    out = resample(w, 16000)
    np.testing.assert_array_equal(out.samples, w.samples)
    assert out.samples is not w.samples


def test_resample_length():
    """22050 Hz の 22050 サンプルは 16000 サンプル"""
    w = Waveform(np.zeros(22050, dtype=np.float32), 22050)
    out = resample(w, 16000)
    assert len(out) == 16000
    assert out.sample_rate == 16000


@pytest.mark.parametrize(
    ("n", "source", "target", "expected"),
    [(22050, 22050, 16000, 16000), (3, 2, 3, 5), (1, 3, 1, 0), (44100, 44100, 16000, 16000)],
)
def test_resampled_length_rounds(n, source, target, expected):
    """round(len * target / source)、0.5 は切り上げ"""
    assert resampled_length(n, source, target) == expected


def test_resample_keeps_sine_frequency():
    """44.1 kHz の 1 kHz 正弦波を 16 kHz にしても DFT のピークは 1 kHz、その他の成分は 1% 未満"""
    t = np.arange(44100) / 44100
    w = Waveform(np.sin(2 * np.pi * 1000 * t).astype(np.float32), 44100)
    out = resample(w, 16000)
    spectrum = np.abs(np.fft.rfft(out.samples.astype(np.float64)))
    freqs = np.fft.rfftfreq(len(out), d=1 / 16000)
    peak = int(np.argmax(spectrum))
    assert freqs[peak] == pytest.approx(1000.0)
    away = np.abs(freqs - 1000.0) > 5.0
    assert spectrum[away].max() < 0.01 * spectrum[peak]


def test_resample_upsampling_keeps_sine_frequency():
    """8 kHz から 16 kHz へのアップサンプリング"""
    t = np.arange(8000) / 8000
    w = Waveform(np.sin(2 * np.pi * 440 * t).astype(np.float32), 8000)
    out = resample(w, 16000)
    assert len(out) == 16000
    spectrum = np.abs(np.fft.rfft(out.samples.astype(np.float64)))
    assert np.fft.rfftfreq(16000, d=1 / 16000)[int(np.argmax(spectrum))] == pytest.approx(440.0)


def test_resample_is_linear(rng):
    """resample(a x) = a resample(x)"""
    x = rng.uniform(-0.5, 0.5, size=2000).astype(np.float32)
    a = 0.3
    scaled = resample(Waveform(a * x, 22050), 16000).samples
    base = resample(Waveform(x, 22050), 16000).samples
    np.testing.assert_allclose(scaled, a * base, atol=1e-6)


def test_resample_rejects_bad_rate():
    """target_rate は正"""
    with pytest.raises(ValueError):
        resample(Waveform(np.zeros(10), 16000), 0)
