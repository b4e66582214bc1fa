"""
Measuring vulnerability profiles
================================

Profile the chip for both mechanisms, check the result against the
generator's ground truth and compare flips at equal wall time.
"""

from dramflip.dram import Mechanism, cycles_to_ms, generate_chip, hc_equivalent
from dramflip.profiler import flip_curve, log_grid, overlap_stats, profile_chip, truth_profile

chip = generate_chip()
rh = profile_chip(chip, Mechanism.RH)
rp = profile_chip(chip, Mechanism.RP)
print(len(rh), "RowHammer cells,", len(rp), "RowPress cells")
print("matches ground truth:", rh.addresses() == truth_profile(chip, Mechanism.RH).addresses(),
      rp.addresses() == truth_profile(chip, Mechanism.RP).addresses())

# %%
# Equal time: 100M cycles of pressing against the hammer count that fits in it.
cycles = 100_000_000
ms = cycles_to_ms(cycles)
hc = hc_equivalent(ms)
rp_n = flip_curve(rp, [cycles]).at(cycles)
rh_n = flip_curve(rh, [hc]).at(hc)
print(f"{ms:.2f} ms: RP {rp_n} flips, RH {rh_n} flips at {hc} activations, ratio {rp_n / rh_n:.1f}")

overlap, h_rh, h_rp = overlap_stats(rh, rp)
print(f"overlap {overlap:.4f}")
print("RH directions", {d.name: n for d, n in h_rh.items()})
print("RP directions", {d.name: n for d, n in h_rp.items()})

# %%
# Cumulative curve on a log grid, ready for plotting.
curve = flip_curve(rp, log_grid(rp.max_budget, 8))
for budget, flips in curve.points:
    print(f"{budget:>12d} {flips:>6d}")
