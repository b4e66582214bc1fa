"""
A simulated chip under hammering and pressing
=============================================

Generate the default chip, drive one victim row both ways and watch a
per-row activation counter stop only one of them.
"""

import numpy as np

from dramflip.dram import Mechanism, generate_chip
from dramflip.engine import DefenseConfig
from dramflip.injectors import InjectionSpec, rowhammer_inject, rowpress_inject

chip = generate_chip()
print("chip", chip.geometry.shape, "fingerprint", chip.fingerprint())

# how many cells of each kind the seed produced
for mech in (Mechanism.RH, Mechanism.RP, Mechanism.BOTH):
    print(mech.name, int((chip.mechanism == mech).sum()))

# pick a victim row with at least one RowHammer cell
row = int(np.flatnonzero(chip.capable_mask(Mechanism.RH)[0].any(axis=1))[3])
n = chip.timing.max_hc_per_window
t = chip.timing.t_refw_cycles - 1

hammer = rowhammer_inject(chip.clone(), InjectionSpec.rowhammer(row, n))
press = rowpress_inject(chip.clone(), InjectionSpec.rowpress(row, t))
print(f"row {row}: {len(hammer.flips)} hammer flips, {len(press.flips)} press flips")

# %%
# A counter that refreshes the neighbours every 10,000 activations.
mac = DefenseConfig.mac(10_000)
hammer_d = rowhammer_inject(chip.clone(), InjectionSpec.rowhammer(row, n), mac)
press_d = rowpress_inject(chip.clone(), InjectionSpec.rowpress(row, t), mac)
print(f"defended: {len(hammer_d.flips)} hammer flips after {len(hammer_d.report.nrr_events)} refreshes")
print(f"defended: {len(press_d.flips)} press flips, same as undefended: {press_d.flips == press.flips}")
