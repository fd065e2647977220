"""Mask-unit / attention-unit bookkeeping.

A mask unit is a 16x16 pixel block.  At stage 1 an attention unit is 2x2
pixels, so each mask unit holds 8x8 attention units.  Index lists store the
global raster index of every visible attention unit on the attention-unit grid,
ordered canonically: visible mask units in raster order, and inside each unit
its r2 x r2 attention units in raster order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import make_rng

MASK_UNIT = 16
PATCH = 2


class EmptyMaskError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(eq=False)
class MaskMap:
    """Visibility bits over the (H/16) x (W/16) mask-unit grid.

    ``height``/``width`` are the padded pixel dims (multiples of 16);
    ``orig_height``/``orig_width`` are the dims before padding.
    """

    height: int
    width: int
    units: np.ndarray
    orig_height: int = 0
    orig_width: int = 0

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=bool)
        if self.height % MASK_UNIT or self.width % MASK_UNIT:
            raise GeometryError(f"mask dims {self.height}x{self.width} not multiples of {MASK_UNIT}")
        if self.units.shape != (self.height // MASK_UNIT, self.width // MASK_UNIT):
            raise GeometryError(f"unit grid shape {self.units.shape} does not match {self.height}x{self.width}")
        if not self.units.any():
            raise EmptyMaskError("mask has no visible units")
        self.orig_height = self.orig_height or self.height
        self.orig_width = self.orig_width or self.width

    def __eq__(self, other):
        return (isinstance(other, MaskMap) and self.height == other.height and self.width == other.width
                and self.orig_height == other.orig_height and self.orig_width == other.orig_width
                and np.array_equal(self.units, other.units))

    @property
    def grid(self):
        return self.units.shape

    @property
    def n_visible(self) -> int:
        return int(self.units.sum())

    @property
    def visible_ratio(self) -> float:
        return self.n_visible / self.units.size

    def unit_indices(self) -> np.ndarray:
        """Raster indices of visible mask units."""
        return np.flatnonzero(self.units.ravel())

    def pixel_mask(self, cropped: bool = True) -> np.ndarray:
        """Boolean H x W pixel visibility implied by the unit grid."""
        px = np.kron(self.units, np.ones((MASK_UNIT, MASK_UNIT), dtype=bool))
        if cropped:
            px = px[:self.orig_height, :self.orig_width]
        return px

    def visible_pixels(self) -> int:
        return int(self.pixel_mask().sum())


@dataclass(eq=False)
class IndexList:
    """Ordered raster indices of visible attention units at one stage.

    ``r1`` is the attention-unit grid width, ``r2`` the number of attention
    units along a mask-unit side, ``rows`` the attention-unit grid height.
    """

    indices: np.ndarray
    r1: int
    r2: int
    rows: int
    stage: int = 1

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return (isinstance(other, IndexList) and (self.r1, self.r2, self.rows) == (other.r1, other.r2, other.rows)
                and np.array_equal(self.indices, other.indices))

    @property
    def unit_px(self) -> int:
        return MASK_UNIT // self.r2

    @property
    def n_units(self) -> int:
        return len(self.indices) // (self.r2 * self.r2)

    def coords(self):
        """(row, col) of every entry on the attention-unit grid."""
        return self.indices // self.r1, self.indices % self.r1

    def unit_coords(self):
        """Mask-unit (row, col) of each group of r2*r2 consecutive entries."""
        first = self.indices[:: self.r2 * self.r2]
        return (first // self.r1) // self.r2, (first % self.r1) // self.r2

    def validate(self) -> None:
        idx = self.indices
        if len(idx) % (self.r2 * self.r2):
            raise GeometryError("index list length is not a multiple of r2^2")
        if len(idx) and (idx.min() < 0 or idx.max() >= self.r1 * self.rows):
            raise GeometryError("index out of grid range")
        if len(np.unique(idx)) != len(idx):
            raise GeometryError("duplicate indices")


# ---------------------------------------------------------------------------
# mask construction


def pad_to_units(h: int, w: int):
    return -(-h // MASK_UNIT) * MASK_UNIT, -(-w // MASK_UNIT) * MASK_UNIT


def build_mask(pixel_mask) -> MaskMap:
    """A mask unit is visible iff any of its pixels is nonzero."""
    pm = np.asarray(pixel_mask) != 0
    if pm.ndim != 2 or min(pm.shape) == 0:
        raise GeometryError(f"pixel mask must be a non-empty 2-D array, got shape {pm.shape}")
    h, w = pm.shape
    ph, pw = pad_to_units(h, w)
    padded = np.zeros((ph, pw), dtype=bool)
    padded[:h, :w] = pm
    units = padded.reshape(ph // MASK_UNIT, MASK_UNIT, pw // MASK_UNIT, MASK_UNIT).any(axis=(1, 3))
    if not units.any():
        raise EmptyMaskError("pixel mask is all zero")
    return MaskMap(ph, pw, units, h, w)


def mask_from_units(units, orig_height: int = 0, orig_width: int = 0) -> MaskMap:
    units = np.asarray(units, dtype=bool)
    h, w = units.shape[0] * MASK_UNIT, units.shape[1] * MASK_UNIT
    return MaskMap(h, w, units, orig_height or h, orig_width or w)


def full_mask(h: int, w: int) -> MaskMap:
    return build_mask(np.ones((h, w), dtype=bool))


# ---------------------------------------------------------------------------
# index algebra


def canonical_index_list(mask: MaskMap, unit_px: int, stage: int = 0) -> IndexList:
    """Enumerate visible attention units of size ``unit_px`` from scratch."""
    r2 = MASK_UNIT // unit_px
    r1 = mask.width // unit_px
    rows = mask.height // unit_px
    units = mask.unit_indices()
    gw = mask.units.shape[1]
    ur, uc = units // gw, units % gw
    a, b = np.divmod(np.arange(r2 * r2), r2)
    idx = (ur[:, None] * r2 + a[None, :]) * r1 + uc[:, None] * r2 + b[None, :]
    if not stage:
        stage = {8: 1, 4: 2, 2: 3, 1: 4}.get(r2, 0)
    return IndexList(idx.ravel(), r1, r2, rows, stage)


def initial_index_list(mask: MaskMap) -> IndexList:
    return canonical_index_list(mask, PATCH, 1)


def unit_index_list(mask: MaskMap) -> IndexList:
    """Index list at mask-unit resolution (r2 == 1)."""
    return canonical_index_list(mask, MASK_UNIT, 4)


def merge_indices(lst: IndexList) -> IndexList:
    """Keep the top-left member of each 2x2 group and remap it to the halved grid."""
    r1, r2 = lst.r1, lst.r2
    if r2 < 2:
        raise GeometryError("cannot merge: attention unit already equals a mask unit")
    n = len(lst.indices) // (r2 * r2)
    kept = lst.indices.reshape(n, r2, r2)[:, ::2, ::2].reshape(-1)
    out = (kept // (r1 * 2)) * (r1 // 2) + (kept % r1) // 2
    return IndexList(out, r1 // 2, r2 // 2, lst.rows // 2, lst.stage + 1)


def split_indices(lst: IndexList) -> IndexList:
    """Expand each index into its four children on the doubled grid, canonically ordered."""
    r1, r2 = lst.r1, lst.r2
    if lst.unit_px < 2 * PATCH:
        raise GeometryError("cannot split below the 2x2-pixel attention unit")
    base = (lst.indices // r1) * 2 * (2 * r1) + (lst.indices % r1) * 2
    bias = np.array([0, 1, 2 * r1, 2 * r1 + 1], dtype=np.int64)
    children = base[:, None] + bias[None, :]
    n = len(lst.indices) // (r2 * r2)
    # within-unit raster order on the new grid is ascending global index
    out = np.sort(children.reshape(n, 4 * r2 * r2), axis=1).reshape(-1)
    return IndexList(out, 2 * r1, 2 * r2, 2 * lst.rows, lst.stage - 1)


# ---------------------------------------------------------------------------
# pixels <-> patches


def pad_image(image: np.ndarray) -> np.ndarray:
    """Replicate-pad bottom/right up to multiples of the mask unit."""
    h, w = image.shape[:2]
    ph, pw = pad_to_units(h, w)
    if (ph, pw) == (h, w):
        return image
    return np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")


def gather_visible(image: np.ndarray, mask: MaskMap, lst: IndexList | None = None) -> np.ndarray:
    """Visible 2x2x3 patches as rows of 12 values, in canonical stage-1 order.

    Only pixels of visible units are indexed; masked pixels are never read.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (mask.height, mask.width):
        raise GeometryError(f"image {image.shape[:2]} does not match mask {mask.height}x{mask.width}")
    lst = initial_index_list(mask) if lst is None else lst
    rows, cols = lst.coords()
    dy, dx = np.divmod(np.arange(PATCH * PATCH), PATCH)
    py = rows[:, None] * PATCH + dy[None, :]
    px = cols[:, None] * PATCH + dx[None, :]
    return image[py, px].reshape(len(lst), PATCH * PATCH * image.shape[2])


def scatter_zero_fill(patches: np.ndarray, lst: IndexList, height: int, width: int,
                      channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if len(patches) != len(lst):
        raise GeometryError(f"{len(patches)} patches for {len(lst)} indices")
    out = np.zeros((height, width, channels))
    rows, cols = lst.coords()
    dy, dx = np.divmod(np.arange(PATCH * PATCH), PATCH)
    py = rows[:, None] * PATCH + dy[None, :]
    px = cols[:, None] * PATCH + dx[None, :]
    out[py, px] = patches.reshape(len(lst), PATCH * PATCH, channels)
    return out


# ---------------------------------------------------------------------------
# random group masks


def gen_group_mask(height: int, width: int, visible_ratio: float, seed: int) -> MaskMap:
    """Union of 1-10 random rectangles, nudged to the target unit-level visible area.

    Rectangles have uniform centres and log-uniform sides in [16, dim/2] px.  The
    union is kept if its visible fraction is within 0.05 of ``visible_ratio``;
    otherwise it is grown or shrunk one boundary unit at a time to the nearest
    achievable count.
    """
    if not 0.0 < visible_ratio <= 1.0:
        raise ValueError(f"visible_ratio must be in (0, 1], got {visible_ratio}")
    ph, pw = pad_to_units(height, width)
    gh, gw = ph // MASK_UNIT, pw // MASK_UNIT
    n = gh * gw
    if visible_ratio == 1.0:
        return MaskMap(ph, pw, np.ones((gh, gw), dtype=bool), height, width)
    rng = make_rng(seed)
    units = np.zeros((gh, gw), dtype=bool)
    for _ in range(int(rng.integers(1, 11))):
        sides = []
        for dim in (height, width):
            hi = max(float(MASK_UNIT), dim / 2)
            sides.append(float(np.exp(rng.uniform(np.log(MASK_UNIT), np.log(hi)))) if hi > MASK_UNIT else hi)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        y0 = int(np.clip((cy - sides[0] / 2) // MASK_UNIT, 0, gh - 1))
        y1 = int(np.clip((cy + sides[0] / 2) // MASK_UNIT, y0, gh - 1))
        x0 = int(np.clip((cx - sides[1] / 2) // MASK_UNIT, 0, gw - 1))
        x1 = int(np.clip((cx + sides[1] / 2) // MASK_UNIT, x0, gw - 1))
        units[y0:y1 + 1, x0:x1 + 1] = True

    lo = max(int(np.ceil((visible_ratio - 0.05) * n - 1e-9)), 1)
    hi = min(int(np.floor((visible_ratio + 0.05) * n + 1e-9)), n)
    target = min(max(int(round(visible_ratio * n)), 1), n)
    if lo <= units.sum() <= hi:
        return MaskMap(ph, pw, units, height, width)
    # out of tolerance: walk to the target count itself, not the window edge
    while units.sum() != target:
        grow = units.sum() < target
        cand = _frontier(units, grow)
        pick = cand[int(rng.integers(len(cand)))]
        units[pick[0], pick[1]] = grow
    return MaskMap(ph, pw, units, height, width)


def _frontier(units: np.ndarray, grow: bool) -> np.ndarray:
    """Masked units touching the visible set (grow) or visible units touching the rest (shrink)."""
    pad = np.pad(units, 1, constant_values=False)
    nbr_vis = pad[:-2, 1:-1] | pad[2:, 1:-1] | pad[1:-1, :-2] | pad[1:-1, 2:]
    padm = np.pad(~units, 1, constant_values=True)
    nbr_mask = padm[:-2, 1:-1] | padm[2:, 1:-1] | padm[1:-1, :-2] | padm[1:-1, 2:]
    sel = (~units & nbr_vis) if grow else (units & nbr_mask)
    cand = np.argwhere(sel)
    if not len(cand):
        cand = np.argwhere(~units if grow else units)
    return cand


# ---------------------------------------------------------------------------
# netpbm I/O


def _read_pnm_header(blob: bytes, magic: bytes):
    if blob[:2] != magic:
        raise ValueError(f"expected netpbm magic {magic!r}, got {blob[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm supported (maxval {maxval})")
    return w, h, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) -> boolean visibility (nonzero = visible)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, pos = _read_pnm_header(blob, b"P5")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w) != 0


def write_pgm(path, mask) -> None:
    m = np.asarray(mask)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.where(m != 0, 255, 0).astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) -> float image in [0, 1], shape H x W x 3."""
    with open(path, "rb") as fh:
        blob = fh.read()
    w, h, pos = _read_pnm_header(blob, b"P6")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())
