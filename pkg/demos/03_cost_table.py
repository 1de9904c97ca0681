"""Parameter and FLOP counts for the two reference configurations."""

from psvit.model import PRESETS, cost_report, count_flops

for name in ("ps-vit-ti", "ps-vit-b"):
    for share in (False, True):
        cfg = PRESETS[name].replace(share_weights=share)
        r = cost_report(cfg)
        tag = name + (" shared" if share else "")
        print(f"{tag:<18s} {r.total_params / 1e6:6.2f}M params  {r.total_flops / 1e9:5.2f}B FLOPs")
        for module, params, flops in r.rows():
            print(f"    {module:<9s} {params:>11,d} {flops:>15,d}")

# Sampling density drives cost: the encoders see n^2 tokens.
b = PRESETS["ps-vit-b"]
for n in (10, 12, 14, 16, 18):
    print(f"ps-vit-b n={n:<3d} {count_flops(b.replace(n=n)) / 1e9:5.2f}B FLOPs")
