import numpy as np
import pytest

from emic.rangecoder import (TOTAL, BitstreamContainer, ContainerError, DecodeError, cumulative, pmf_to_cdf,
                             quantize_pmf, rc_decode, rc_encode, table_cost_bits)


def test_quantize_pmf_examples():
    assert quantize_pmf([0.5, 0.5]).tolist() == [32768, 32768]
    assert quantize_pmf([0.75, 0.25]).tolist() == [49152, 16384]
    rng = np.random.default_rng(0)
    f = quantize_pmf(rng.dirichlet(np.full(255, 0.05), 200))
    assert np.all(f.sum(axis=1) == TOTAL)
    assert f.min() >= 1
    assert quantize_pmf([1.0, 0.0, 0.0]).tolist() == [65534, 1, 1]


def test_cumulative():
    assert cumulative([3, 1, 2]).tolist() == [0, 3, 4, 6]


def test_empty_stream():
    data = rc_encode([], np.zeros((0, 3), dtype=np.int64))
    assert len(data) == 2
    assert rc_decode(data, []) == []


def test_uniform_256_size():
    rng = np.random.default_rng(1)
    sym = rng.integers(0, 256, 1000)
    cdfs = np.tile(pmf_to_cdf(np.full(256, 1 / 256)), (1000, 1))
    data = rc_encode(sym, cdfs)
    assert abs(len(data) - 1000) <= 8
    assert rc_decode(data, cdfs) == sym.tolist()


def test_round_trip_random_tables():
    rng = np.random.default_rng(2)
    for n_sym, alpha in [(5000, 0.3), (5000, 5.0), (2000, 0.02)]:
        k = int(rng.integers(2, 300))
        pmfs = rng.dirichlet(np.full(k, alpha), n_sym)
        cdfs = pmf_to_cdf(pmfs)
        sym = np.array([rng.choice(k, p=p) for p in pmfs])
        data = rc_encode(sym, cdfs)
        assert rc_decode(data, cdfs) == sym.tolist()
        assert len(data) <= table_cost_bits(sym, cdfs) / 8 + 16
        assert rc_encode(sym, cdfs) == data


def test_list_of_tables_with_varying_alphabets():
    rng = np.random.default_rng(3)
    cdfs = [pmf_to_cdf(rng.dirichlet(np.ones(int(k)))) for k in rng.integers(2, 40, 500)]
    sym = [int(rng.integers(len(c) - 1)) for c in cdfs]
    assert rc_decode(rc_encode(sym, cdfs), cdfs) == sym


def test_certain_symbols_cost_nothing_beyond_flush():
    cdf = np.array([0, TOTAL])
    data = rc_encode(np.zeros(1000, int), [cdf] * 1000)
    assert len(data) == 2
    assert rc_decode(data, [cdf] * 1000) == [0] * 1000


def test_extreme_tables():
    # a symbol with the minimum frequency, repeated
    cdf = pmf_to_cdf([1.0, 0.0])
    sym = [1] * 300 + [0] * 300
    data = rc_encode(sym, [cdf] * 600)
    assert rc_decode(data, [cdf] * 600) == sym
    assert len(data) <= table_cost_bits(sym, [cdf] * 600) / 8 + 16


def test_truncation_is_detected():
    rng = np.random.default_rng(4)
    cdfs = np.tile(pmf_to_cdf(np.full(16, 1 / 16)), (400, 1))
    sym = rng.integers(0, 16, 400)
    data = rc_encode(sym, cdfs)
    with pytest.raises(DecodeError):
        rc_decode(data[:-3], cdfs)
    with pytest.raises(DecodeError):
        rc_decode(data + b"\x00\x00", cdfs)


def test_symbol_outside_table():
    with pytest.raises(ValueError):
        rc_encode([3], np.array([[0, 100, TOTAL]]))
    with pytest.raises(ValueError):
        rc_encode([0, 0], np.array([[0, 100, TOTAL]]))


# -- container --------------------------------------------------------------

def _container():
    units = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]], bool)
    return BitstreamContainer(40, 48, units, 0xDEADBEEF, 2, b"\x01\x02\x03", [b"a", b"", b"bcd", b"ef"])


def test_container_round_trip_and_layout():
    c = _container()
    blob = c.serialize()
    assert BitstreamContainer.parse(blob) == c
    assert c.header_size() == 4 + 1 + 2 + 2 + 2 + 4 + 1
    assert blob[:4] == b"EMIC"
    assert blob[5:9] == (40).to_bytes(2, "little") + (48).to_bytes(2, "little")
    # raster bits 101 011 110, MSB first
    assert blob[9:11] == bytes([0b10101111, 0b00000000])
    assert blob[11:15] == (0xDEADBEEF).to_bytes(4, "little")
    assert blob[15] == 2
    assert blob[16:20] == (3).to_bytes(4, "little")
    assert len(blob) == c.header_size() + 5 * 4 + 3 + 1 + 0 + 3 + 2
    assert c.payload_bits() == 8 * 9


def test_flipping_a_mask_bit_changes_one_byte():
    c = _container()
    a = c.serialize()
    c.units[2, 0] = False
    b = c.serialize()
    diff = [i for i in range(len(a)) if a[i] != b[i]]
    assert len(diff) == 1 and 9 <= diff[0] < 11


def test_container_parse_errors():
    blob = _container().serialize()
    with pytest.raises(ContainerError, match="magic"):
        BitstreamContainer.parse(b"EMIX" + blob[4:])
    with pytest.raises(ContainerError, match="version"):
        BitstreamContainer.parse(blob[:4] + b"\x09" + blob[5:])
    with pytest.raises(ContainerError, match="segment"):
        BitstreamContainer.parse(blob[:-1])
    with pytest.raises(ContainerError):
        BitstreamContainer.parse(blob[:12])
    with pytest.raises(ContainerError):
        BitstreamContainer(40, 48, np.ones((2, 2), bool), 0, 0, b"").serialize()
    with pytest.raises(ContainerError):
        BitstreamContainer(70000, 48, np.ones((4375, 3), bool), 0, 0, b"").serialize()
