"""
Forward noising and the strided sampler
=======================================

With a noise predictor that knows the answer, the 50-step sampler walks
back from pure noise to the clean image.  The printout tracks PSNR of the
running x0 estimate.
"""
import numpy as np

from chardiff.diffusion import make_schedule, q_sample, restore
from chardiff.imaging import to_model
from chardiff.metrics import psnr
from chardiff.plates import PlateConfig, render_plate

schedule = make_schedule(1000, 1e-4, 0.02, 50)
print("alpha_bar at t = 0, 499, 999:", schedule.alpha_bars[[0, 499, 999]])
print("sampler visits", schedule.taus[:3], "...", schedule.taus[-3:])

x0 = to_model(render_plate("K7Q2B", PlateConfig(), seed=0).hq_image)[None, None]
noisy = q_sample(x0, 500, np.random.default_rng(0).standard_normal(x0.shape), schedule)
print(f"x_500 PSNR vs clean: {psnr((noisy[0, 0] + 1) * 127.5, (x0[0, 0] + 1) * 127.5):.2f} dB")


def oracle(x_t, x_lq, t, priors):
    ab = schedule.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)


for mode in ("deterministic", "ancestral"):
    traj = []
    restore(np.zeros_like(x0), None, oracle, schedule, mode, seed=0, trajectory=traj)
    db = [psnr((x[0, 0] + 1) * 127.5, (x0[0, 0] + 1) * 127.5) for x in traj]
    print(f"{mode:>13}: first estimate {db[0]:.1f} dB, last {db[-1]:.1f} dB")
