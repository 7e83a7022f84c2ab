"""Do distant positions share features?

Cosine similarity between the top-left diagonal feature and the rest of the
diagonal, at the stage-3 output, for the same architecture with attention
off vs on. Conv-only features decorrelate past the conv receptive radius;
enabling the expanded-window attention mixes the whole window and keeps the
long-distance similarity up.
"""

import numpy as np

from emo import EMOVariantConfig, Rng, build_emo, conv_receptive_radius, diag_similarity

dims = (8, 8, 16, 16)
with_attn = EMOVariantConfig("attn", (1, 1, 2, 1), dims, (2.0, 2.0, 2.0, 2.0),
                             num_classes=10, attn_stages=frozenset({3, 4}))
conv_only = EMOVariantConfig("conv", (1, 1, 2, 1), dims, (2.0, 2.0, 2.0, 2.0),
                             num_classes=10, attn_stages=frozenset())

rf = conv_receptive_radius(conv_only, 3)
print(f"stage-3 conv receptive radius: {rf['radius_input_px']} input px "
      f"(stride {rf['stage_stride']}), receptive fields disjoint beyond "
      f"diagonal distance {rf['disjoint_distance']}")
print()

x = Rng(0).normal("x", (1, 3, 224, 224), precision="f64")
s_conv = diag_similarity(build_emo(conv_only, seed=0, precision="f64"), 3, x)
s_attn = diag_similarity(build_emo(with_attn, seed=0, precision="f64"), 3, x)

print(f"{'distance':>8} {'conv only':>10} {'with attention':>15}")
for d in range(len(s_conv)):
    print(f"{d:>8} {s_conv[d]:>10.3f} {s_attn[d]:>15.3f}")

d0 = rf["disjoint_distance"]
print()
print(f"mean similarity at distance >= {d0}: conv {s_conv[d0:].mean():+.3f}, "
      f"attention {s_attn[d0:].mean():+.3f}")

wins = 0
for seed in range(10):
    xs = Rng(seed).normal("x", (1, 3, 224, 224), precision="f64")
    a = diag_similarity(build_emo(with_attn, seed=seed, precision="f64"), 3, xs)[d0:].mean()
    c = diag_similarity(build_emo(conv_only, seed=seed, precision="f64"), 3, xs)[d0:].mean()
    wins += a > c
print(f"attention wins on {wins}/10 seeds")
