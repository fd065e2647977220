# Compress a masked image, decode it, and look at what was written.
# Run: python demos/02_compress_round_trip.py
import numpy as np

from emic.geometry import gen_group_mask
from emic.network import StageConfig
from emic.pipeline import Model, encode, decompress, masked_psnr
from emic.rangecoder import BitstreamContainer
from emic.train import TOY_CONFIG, synthetic_images

# Untrained weights, toy width. Scaling the latent projection makes the coded
# symbols non-trivial so the bitstream has something in it.
model = Model.init(StageConfig(**TOY_CONFIG), seed=0)
model.params["enc.out.w"].data *= 300
model.params["hyper.enc.out.w"].data *= 100
model.params.narrow()

img = synthetic_images(1, seed=5, height=80, width=96)[0]
pm = gen_group_mask(80, 96, 0.6, seed=1).pixel_mask()

res = encode(img, pm, model, lambda_index=1)
blob = res.container.serialize()
print("container bytes:", len(blob), "header bytes:", res.container.header_size())
print("estimated bits per stream:", [round(b, 1) for b in res.stream_estimates])
print("actual bytes per stream:", [len(res.container.z_stream)] + [len(s) for s in res.container.y_streams])

rec = decompress(blob, model)
print("bit-exact:", np.array_equal(rec, res.reconstruction))
print("masked pixels all zero:", bool(np.all(rec[~pm] == 0)))
# the weights are untrained, so the picture itself is poor
print("psnr on visible pixels: %.2f dB" % masked_psnr(img, rec, pm))

# The header carries the unit mask, so a reader can tell which regions exist
# without decoding anything.
print(BitstreamContainer.parse(blob).units.astype(int))

# Changing hidden pixels does not change a single byte.
img2 = img.copy()
img2[~pm] = 0.123
print("same bytes after editing hidden pixels:", encode(img2, pm, model, 1).container.serialize() == blob)
