"""Compare the multiscale solution to the fine-grid reference on a sequence of
coarse grids with growing oversampling.  Takes a couple of minutes.

    python3 demos/03_convergence.py
"""
from cemgmsdg import SourceSpec, StudyConfig, run_convergence_study, synthetic_field

cfg = StudyConfig(
    n_fine=64,
    coarse_sizes=[4, 8, 16],
    m_list=[2, 3, 4],
    medium=lambda mesh: synthetic_field(mesh, 1.0, 100.0, "inclusions", seed=0),
    source=SourceSpec(f0=20.0, h_src=1 / 16, spatial_sign="negative"),
    tau=2e-4,
    T=0.2,
)

print("   H     m   energy %    L2 %    order")
for r in run_convergence_study(cfg):
    order = "" if r.order_est != r.order_est else f"{r.order_est:.2f}"
    print(f"  1/{round(1 / r.H):<3d} {r.m}   {r.energy_error_pct:8.3f}  {r.l2_error_pct:7.3f}   {order}")
