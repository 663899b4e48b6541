# coding: utf-8

# # How much smaller is the slim variant?
#
# Both networks share the same four-level skeleton. The slim one uses a single
# conv/BN/ReLU per stage, the standard one two.

from slimunet.network import build_slim_unet, build_std_unet, count_macs, count_params, infer_shapes

slim, std = build_slim_unet(), build_std_unet()
n_slim = count_params(slim).total_trainable
n_std = count_params(std).total_trainable
print(f"slim {n_slim:,}  standard {n_std:,}  ratio {n_slim / n_std:.4f}")

# Per-layer breakdown of the first encoder stage.

for name, n in count_params(std).per_layer[:8]:
    print(f"{name:<12}{n:>8,}")

# Where do the parameters live? Mostly in the bottleneck and the deepest decoder stage.

report = count_params(slim).per_layer
heavy = sorted(report, key=lambda kv: -kv[1])[:5]
print(heavy)

# Multiply-accumulates per 128x128 image.

print(f"MACs slim {count_macs(slim) / 1e9:.2f} G, standard {count_macs(std) / 1e9:.2f} G")

# Feature-map shapes along the slim network.

for name, shape in infer_shapes(slim):
    if name.endswith(("relu1", "pool", "concat")) or name.startswith("head"):
        print(f"{name:<14}{shape}")
