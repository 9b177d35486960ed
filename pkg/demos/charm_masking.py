"""
Region-masked cross-attention
=============================

Two characters, two masks on an 8x16 feature grid.  Each character's
attention map is zero outside its own region, and every position outside
the union of masks passes through untouched.
"""
import numpy as np

from chardiff.charm import charm_forward, init_charm
from chardiff.charprior import boxes_to_masks
from chardiff.numerics import Tensor, make_rng, precision

rng = make_rng(0)
C = 8
with precision(np.float64):
    params = init_charm(C, seed=0)

# boxes in a 32x64 image map onto cells of the 8x16 mid-block grid
masks = np.stack([m.grid for m in boxes_to_masks([(4, 6, 14, 26), (34, 6, 44, 26)], (32, 64), (8, 16))])
print("mask of character 0 (1 = attended cell):")
print(masks[0].astype(int))

features = rng.standard_normal((C, 8, 16))
embeddings = rng.standard_normal((2, C))
out, att = charm_forward(Tensor(features, dtype=np.float64), embeddings, masks, params, return_attention=True)

for i in range(2):
    a = att[0, i].reshape(8, 16)
    print(f"char {i}: attention sums to {a.sum():.6f}, mass outside its mask = {a[~masks[i]].sum()}")

outside = ~masks.any(axis=0)
print("untouched positions bit-identical:", out.data[:, outside].tobytes() == features[:, outside].tobytes())

# the literal "softmax everywhere, then mask" reading leaks: compare
lit = charm_forward(Tensor(features, dtype=np.float64), embeddings, masks, params, literal_eq3=True).data
print("literal variant, max change outside masks:", np.abs(lit - features)[:, outside].max())
