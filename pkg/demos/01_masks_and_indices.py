# Masks, index lists and the merge / split algebra.
# Run: python demos/01_masks_and_indices.py
import numpy as np

from emic.geometry import gen_group_mask, initial_index_list, merge_indices, split_indices, mask_from_units
from emic.attention import decay_from_indices

# A 64x64 image has a 4x4 grid of 16x16 mask units. Keep about half of them.
mask = gen_group_mask(64, 64, 0.5, seed=3)
print(mask.units.astype(int))
print("visible units:", mask.n_visible, "ratio:", mask.visible_ratio)

# Tokens start as 2x2-pixel attention units, listed unit by unit.
lst = initial_index_list(mask)
print("stage", lst.stage, "tokens", len(lst), "grid width", lst.r1, "per-unit side", lst.r2)
print("first unit's tokens:", lst.indices[:8], "...")

# Each merge halves the grid; three merges reach one token per mask unit.
for _ in range(3):
    lst = merge_indices(lst)
    print("stage", lst.stage, "tokens", len(lst), "grid width", lst.r1)
print("unit-level indices:", lst.indices)

# Split undoes merge exactly.
back = split_indices(lst)
print("split(merge(x)) == x:", back == merge_indices(merge_indices(initial_index_list(mask))))

# Decay between visible tokens only depends on grid distance, so gaps in the
# mask show up as smaller weights.
small = mask_from_units([[1, 0, 1]])
d = decay_from_indices(merge_indices(merge_indices(merge_indices(initial_index_list(small)))), 0.5)
np.set_printoptions(precision=3)
print(d)  # units 0 and 2 are two columns apart: 0.5**2
