"""Quick invariant checks across every module; used by ``emic selftest``."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple

import numpy as np

from . import numcore as nc
from .attention import decay_from_indices, decay_matrix, dpisa, pisa
from .flops import linear_flops
from .geometry import (IndexList, canonical_index_list, full_mask, gen_group_mask, initial_index_list,
                       merge_indices, split_indices)
from .network import StageConfig
from .pipeline import Model, encode, decompress, rd_loss
from .rangecoder import BitstreamContainer, pmf_to_cdf, rc_decode, rc_encode
from .train import TOY_CONFIG, TrainState, plateau_schedule


def _index_algebra():
    for seed in range(20):
        size = (32, 64, 128)[seed % 3]
        mask = gen_group_mask(size, size, 0.5, seed)
        lst = initial_index_list(mask)
        for stage in range(3):
            merged = merge_indices(lst)
            if merged != canonical_index_list(mask, 2 << (stage + 1), stage + 1):
                return False
            if split_indices(merged) != lst:
                return False
            lst = merged
    return True


def _decay_sampling():
    rng = nc.make_rng(1)
    for _ in range(20):
        mask = gen_group_mask(64, 64, 0.5, int(rng.integers(1 << 30)))
        lst = initial_index_list(mask)
        rows, cols = np.divmod(np.arange(lst.rows * lst.r1), lst.r1)
        full = decay_matrix(rows, cols, 0.9)
        if not np.array_equal(decay_from_indices(lst, 0.9), full[np.ix_(lst.indices, lst.indices)]):
            return False
    return True


def _attention():
    rng = nc.make_rng(2)
    q, k, v = (rng.standard_normal((4, 1, 3)) for _ in range(3))
    dm = rng.uniform(0, 1, (4, 4))
    a = dpisa(q, k, v, dm, np.ones((1, 1))).data
    b = pisa(q[:, 0], k[:, 0], v[:, 0], dm).data
    return np.array_equal(a[:, 0], b)


def _gradients():
    rng = nc.make_rng(3)
    x = nc.Tensor(rng.standard_normal((3, 4)), "x", tracked=True)
    w = rng.standard_normal((4, 2))

    def f(xv):
        return nc.sum_all(nc.gelu(nc.matmul(nc.softmax_rows(xv), w)))

    with nc.Tape() as tape:
        loss = f(x)
    g = nc.backward(tape, loss)["x"]
    h = 1e-5
    for i in range(3):
        for j in range(4):
            xp, xm = x.data.copy(), x.data.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (f(nc.Tensor(xp)).item() - f(nc.Tensor(xm)).item()) / (2 * h)
            if abs(fd - g[i, j]) > 1e-4 * max(abs(fd), abs(g[i, j]), 1e-4):
                return False
    return True


def _range_coder():
    rng = nc.make_rng(4)
    pmfs = rng.dirichlet(np.full(9, 0.7), 2000)
    cdfs = pmf_to_cdf(pmfs)
    sym = np.array([rng.choice(9, p=p) for p in pmfs])
    data = rc_encode(sym, cdfs)
    return rc_decode(data, cdfs) == sym.tolist()


def _end_to_end():
    model = Model.init(StageConfig(**TOY_CONFIG), 5)
    rng = nc.make_rng(5)
    img = rng.random((48, 40, 3))
    mask = gen_group_mask(48, 40, 0.5, 5).pixel_mask()
    res = encode(img, mask, model, 1)
    blob = res.container.serialize()
    rec = decompress(blob, model)
    if not np.array_equal(rec, res.reconstruction) or np.any(rec[~mask] != 0):
        return False
    img2 = img.copy()
    img2[~mask] = rng.random(int((~mask).sum() * 3)).reshape(-1, 3)
    same = encode(img2, mask, model, 1).container.serialize() == blob
    return same and BitstreamContainer.parse(blob) == res.container


def _loss_semantics():
    x = np.random.default_rng(6).random((32, 32, 3))
    mask = np.zeros((32, 32), dtype=bool)
    mask[:16, :] = True
    r = rd_loss(x, x, mask, 600.0, 424.0, 0.01)
    return r.distortion == 0.0 and r.bpp == 2.0


def _plateau():
    state = TrainState(lr=1e-4)
    for _ in range(11):
        plateau_schedule(state, 1.0)
    return math.isclose(state.lr, 3e-5) and linear_flops(16, 128, 256) == 1048576


CHECKS: List[Tuple[str, Callable[[], bool]]] = [
    ("index_algebra", _index_algebra),
    ("decay_sampling", _decay_sampling),
    ("attention_degenerate", _attention),
    ("gradients", _gradients),
    ("range_coder", _range_coder),
    ("end_to_end", _end_to_end),
    ("loss_semantics", _loss_semantics),
    ("plateau_and_flops", _plateau),
]


def _run_one(check):
    name, fn = check
    try:
        return name, bool(fn()), ""
    except Exception as exc:  # reported, not raised
        return name, False, f"{type(exc).__name__}: {exc}"


def run_selftest(workers: int = 1) -> List[Tuple[str, bool, str]]:
    """Run every check; returns (name, passed, detail) in a fixed order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(_run_one, CHECKS))
