"""Flow dynamics walkthrough: the noise schedule, deterministic transport,
and the stochastic sampler that preserves the same marginals.

Run:  python demos/01_flow_dynamics.py
"""
import numpy as np

from flowsteer.flows import (normalize_schedule, ode_step, score_from_velocity,
                             sde_step)

# The few-step schedule: raw timesteps count down from 1000; normalized
# times run from 0 (pure noise) toward 1 (data).
schedule = normalize_schedule([1000, 755, 522, 0])
print("raw timesteps:   ", schedule.raw)
print("normalized times:", schedule.times)
print("per-step dt:     ", schedule.dts)


# A 1-dim analytic playground: data ~ N(0,1), noise ~ N(0,1). The optimal
# velocity field is linear in x, so we can transport entire ensembles and
# compare the ODE against the noise-injecting SDE.
def analytic_velocity(x, t):
    var = t * t + (1.0 - t) ** 2
    return (2.0 * t - 1.0) / var * x


rng = np.random.default_rng(0)
paths = rng.standard_normal(50_000)
x_ode = paths.copy()
x_sde = paths.copy()
steps, t_end, sigma = 64, 0.98, 0.4
dt = t_end / steps
for k in range(steps):
    t = k * dt
    x_ode = ode_step(x_ode, analytic_velocity(x_ode, t), dt)
    v = analytic_velocity(x_sde, t)
    x_sde, record = sde_step(x_sde, v, t, dt, sigma, rng.standard_normal(x_sde.shape))

print(f"\nafter {steps} steps to t={t_end} (sigma={sigma}):")
print(f"  ODE ensemble: mean {x_ode.mean():+.4f}  std {x_ode.std():.4f}")
print(f"  SDE ensemble: mean {x_sde.mean():+.4f}  std {x_sde.std():.4f}")
print(f"  interpolant's closed-form std at t: {np.sqrt(t_end**2 + (1-t_end)**2):.4f}")
print("\nThe stochastic sampler explores (every path differs) while the")
print("ensemble statistics match the deterministic transport - that is the")
print("property the policy-optimization stage relies on.")

# Every stochastic step records its Gaussian transition; this density is
# what the importance ratios differentiate later.
x = np.zeros(4)
v = np.ones(4)
_, rec = sde_step(x, v, 0.245, 0.233, sigma, rng.standard_normal(4), step_index=1)
print(f"\none transition record: step={rec.step_index} scale={rec.scale:.4f} "
      f"log_density={rec.log_density:.3f}")
print("score at the same point:", score_from_velocity(x, v, 0.245)[:2], "...")
