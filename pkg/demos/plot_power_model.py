"""
Splitting package power across cores
====================================

Only the package power is measured. A linear model on rescaled
performance counters, fitted on a busy training span, predicts it and
splits it into an uncore share plus one share per core. Those shares are
the inputs of the thermal identification.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from thermid import ScalingBounds, fit_power_model, partition_powers, predict_package
from thermid.power import error_fractions
from thermid.synth import WorkloadSpec, gen_thermal_truth, gen_workload, simulate
from thermid.telemetry import rescale_metrics

OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)

N_CORES = 8
TRAIN = 43200  # one day at 2 s

jobs = gen_workload(WorkloadSpec("job_steps", amplitude=25, low=2, duration=TRAIN + 10800, dwell=(150, 3600)),
                    N_CORES, seed=0)
ds = simulate(gen_thermal_truth(N_CORES, 0), jobs, seed=1, power_noise_w=1.0)
frame = rescale_metrics(ds.frame, ScalingBounds.nominal())
train, test = frame.slice(0, TRAIN), frame.slice(TRAIN, frame.n_samples)

###############################################################################
# Ordinary least squares on the training day, then a check on the hours
# that follow. The two thresholds correspond to roughly 1 C and 3 C of
# temperature error through a typical thermal gain.

model = fit_power_model([train])
print("true  core weights:", np.round(ds.power_truth.beta[:, 0], 2))
print("fitted core weights:", np.round(model.beta[:, 0], 2))
for name, part in (("train", train), ("held out", test)):
    frac = error_fractions(predict_package(model, part), part.pkg_power)
    print(f"{name:>9}: {frac[3.23]:.1%} within 3.23 W, {frac[9.68]:.1%} within 9.68 W")

###############################################################################
# The split. Each core's share follows its own activity; shares are
# clamped at zero, so they add back up to the package prediction wherever
# no clamping was needed.

pp = partition_powers(model, test)
print("samples with a clamped share:", pp.n_clamped)
t_hours = np.arange(test.n_samples) * 2 / 3600
fig, (top, bottom) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
top.plot(t_hours, test.pkg_power, color="0.6", lw=0.6, label="measured package")
top.plot(t_hours, pp.package, lw=0.9, label="model")
top.set_ylabel("W")
top.legend(loc="upper right")
bottom.plot(t_hours, pp.uncore, lw=0.9, label="uncore")
for k in range(3):
    bottom.plot(t_hours, pp.per_core[k], lw=0.8, label=f"core {k}")
    bottom.plot(t_hours, ds.true_inputs[k + 1, TRAIN:], lw=0.5, ls=":", color="k")
bottom.set_xlabel("hours after the training day")
bottom.set_ylabel("W (dotted: truth)")
bottom.legend(loc="upper right", ncol=4)
fig.tight_layout()
fig.savefig(OUT / "power_model.png", dpi=120)
