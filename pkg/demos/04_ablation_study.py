"""Run the six-condition ablation grid at smoke scale and print the table.

Conditions: both pretrained bases sampled open-endedly, standard fine-tuning,
anchored fine-tuning, anchored training from a standard (annotation-free)
base, and the anchored checkpoint decoded with an injected empty annotation
block. Post-training data is restricted to a narrow slice of the world so
collapse pressure is real; the anchored row should resist it best.

Smoke scale finishes in a couple of minutes but is statistically noisy;
see configs/study.yaml for the settings the acceptance-grade studies use.
"""

from anchorlm.experiments import Workspace, load_config, run_ablation_grid, write_outputs

cfg = load_config("configs/smoke.yaml", out_dir="demo_runs")
ws = Workspace(cfg)
result = run_ablation_grid(cfg, ws)

print(f"{'condition':44s} {'mean bits':>9s}  95% CI")
for row in result.rows:
    print(f"{row['condition']:44s} {row['mean_entropy_bits']:9.3f}  "
          f"[{row['ci_lo']:.3f}, {row['ci_hi']:.3f}]")

print()
print("margins vs anchored (positive = anchored more diverse):")
for name, margin in result.report["margins_vs_anchored"].items():
    print(f"  {name:44s} {margin:+.3f}")

out = write_outputs(result, "demo_runs/results")
print(f"\nwrote {out}/metrics.csv")
