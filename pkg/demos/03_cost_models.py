"""Resource metrics: latency lookup tables, MAC counts, and the CO2 line.

Latency is a per-layer table keyed by (width M, kernel k); the total for a
choice is the sum over layers, which is what lets the optimizer budget
per-iteration reductions.  Tables here are synthetic (a*k^2*C*M*H*W + b) but
a measured table drops in through the same JSON file format.
"""
from netshrink.cost import (
    CO2_LBS_PER_GPU_HOUR,
    MacModel,
    co2_estimate,
    interpolate_latency,
    synthetic_latency_table,
    total_resource,
)
from netshrink.supernet import LayerSpec, full_width_choice

specs = [
    LayerSpec(index=0, c=3, t=8, k_max=5, stride=1),
    LayerSpec(index=1, c=8, t=8, k_max=3, stride=2),
    LayerSpec(index=2, c=8, t=8, k_max=3, stride=1),
]
table = synthetic_latency_table(specs, (8, 8), seed=0)
table.validate_against(specs)

full = full_width_choice(specs)
print(f"full-width latency: {total_resource(full, table):.3f} ms")
for i in range(3):
    per = [table.layer_cost(i, m, specs[i].kernel_grid[-1]) for m in specs[i].width_grid]
    print(f"  layer {i} latency over widths {specs[i].width_grid}:")
    print("    ", " ".join(f"{v:.3f}" for v in per))

print("\nremoving stride-1 layer 2 entirely:",
      f"{total_resource(full.replace(2, 0, 3), table):.3f} ms")

# widths between measured grid points interpolate linearly (k stays exact)
layer0 = table.layers[0]
print("\ninterpolated latency at unmeasured width 4.5, k=5:",
      f"{interpolate_latency(layer0, 4.5, 5):.3f} ms",
      f"(neighbors {layer0[5][4]:.3f} / {layer0[5][5]:.3f})")

macs = MacModel(specs, (8, 8))
print(f"\nfull-width MACs: {total_resource(full, macs):,.0f}")
print(f"half-width MACs: {total_resource(full.replace(0, 4, 5).replace(1, 4, 3).replace(2, 4, 3), macs):,.0f}")

# the CO2-per-GPU-hour ratio comes from the 1438 lbs / (64 GPUs x 79 h) estimate
print(f"\nCO2 ratio: {CO2_LBS_PER_GPU_HOUR:.4f} lbs per GPU-hour")
for hours in (397, 656, 1315, 2304):
    print(f"  {hours:5d} GPU-hours -> {co2_estimate(hours):4d} lbs")
