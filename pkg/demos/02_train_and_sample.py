"""Train a small model end to end and watch anchored decoding in action.

Pipeline: annotated pretraining corpus -> pretrain -> anchored fine-tuning
(prompt and annotation loss masked) -> sampling. In anchored mode the model
first writes its own annotation block after the prompt and then a response
conditioned on it; the annotation is model-generated, never injected.

Uses the acceptance-grade budgets from configs/study.yaml because the skill
of opening an annotation block is taught only by the rare (p=0.003) partial
unmasking of annotation structure during fine-tuning — it needs the full
10k-example x 3-epoch exposure to become reliable. Expect ~10-15 minutes on
an 8-core CPU; checkpoints are cached under demo_runs/ for re-runs.
"""

from anchorlm.experiments import Workspace, load_config
from anchorlm.sampler import batch_generate

cfg = load_config(
    "configs/study.yaml",
    overrides=["sample.n_samples=8", "sample.max_new_tokens=48"],
    out_dir="demo_runs",
)
ws = Workspace(cfg)

print("pretraining (annotated regime)...")
base = ws.pretrained("pretrain-annotated")
print(f"  final loss {base.meta.metrics['final_loss']:.3f} "
      f"over {base.meta.token_count} tokens")

print("anchored fine-tuning (annotation loss masked)...")
ckpt, entropy = ws.sft("sft-anchored", base)
print(f"  val perplexity {ckpt.meta.metrics['val_perplexity']:.2f}, "
      f"lineage {ckpt.meta.lineage}")

print()
print("anchored sampling: the <ann> block below is generated by the model")
sample_cfg = cfg.sample_config("anchored", seed_offset=1)
prompts = ["please share one short story"] * cfg["sample"]["n_samples"]
for g in batch_generate(ckpt, prompts, sample_cfg, ws.vocab):
    marker = " [format failure]" if "format_failure" in g.flags else ""
    print(f"  ann: {g.annotation!r}{marker}")
    print(f"  res: {g.response!r}")
    print()
