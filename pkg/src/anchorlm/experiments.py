"""Experiment harness: configuration, the three desk-scale studies, and
report emission.

Every study writes `results/<study>/<config-hash>/` containing `metrics.csv`
(schema-stable, no timestamps, config hash and master seed embedded in every
row), `generations.jsonl`, and `report.json`. Re-running a study with the same
config and seed reproduces `metrics.csv` byte-identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import tokenizer as tk
from .evaluation import (
    bag_of_features_embed,
    make_exact_labeler,
    pairwise_dissimilarity,
    semantic_entropy,
)
from .model import ModelConfig
from .pipeline import AnnotatedDocument, interleave, standard_document_ids, token_budget_match
from .sampler import SampleConfig, batch_generate
from .tokenizer import Vocab, build_vocab
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    posttrain,
    pretrain,
    save_checkpoint,
)
from .world import (
    CATEGORIES,
    PROMPT_TEMPLATES,
    WorldSpec,
    build_posttraining_subset,
    build_pretraining_corpus,
    world_lexicon,
)

__all__ = [
    "ExperimentConfig",
    "StudyResult",
    "ConfigError",
    "load_config",
    "default_config",
    "config_hash",
    "Workspace",
    "run_controlled_study",
    "run_ablation_grid",
    "run_likelihood_vs_diversity",
    "run_temperature_sweep",
    "STUDIES",
]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "out_dir": "results",
    "world": {"seed": 0, "min_chunks": 2, "max_chunks": 5},
    "model": {
        "context_len": 128,
        "n_layers": 2,
        "d_model": 64,
        "n_heads": 4,
        "ff_mult": 4,
        "init_scale": 0.02,
    },
    "pretrain": {
        "n_docs": 4000,
        "token_budget": 300000,
        "window": 128,
        "batch_size": 16,
        "lr": 3e-3,
    },
    "sft": {
        "n_examples": 2000,
        "batch_size": 16,
        "epochs": 1,
        "lr_candidates": [1e-3],
        "val_fraction": 0.02,
        "partial_unmask_prob": 0.003,
    },
    "sample": {
        "n_samples": 256,
        "temperature": 1.0,
        "top_p": 1.0,
        "max_new_tokens": 64,
    },
    "study": {
        "controlled": {
            "topic_levels": [5, 14, 48],
            "persona_levels": [8, 12, 23],
        },
        "ablation": {
            "restriction": {"topic": 8, "persona": 8, "entity": 8, "location": 8},
        },
        "likelihood": {
            "dataset_sizes": [250, 500, 1000, 2000, 4000],
            "restriction": {"topic": 8, "persona": 8, "entity": 8, "location": 8},
        },
        "temperature": {"temperatures": [0.6, 0.9, 1.0, 1.05, 1.1]},
    },
    "judge": {"base_url": None, "model": None, "api_key_env": "ANNOTATOR_API_KEY"},
}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string", "minLength": 1},
        "world": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "min_chunks": {"type": "integer", "minimum": 1},
                "max_chunks": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "context_len": {"type": "integer", "minimum": 2},
                "n_layers": {"type": "integer", "minimum": 1},
                "d_model": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "ff_mult": {"type": "integer", "minimum": 1},
                "init_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_docs": {"type": "integer", "minimum": 1},
                "token_budget": {"type": "integer", "minimum": 1},
                "window": {"type": "integer", "minimum": 2},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "sft": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_examples": {"type": "integer", "minimum": 2},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr_candidates": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "number", "exclusiveMinimum": 0},
                },
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "partial_unmask_prob": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "sample": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 2},
                "temperature": {"type": "number", "minimum": 0},
                "top_p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_new_tokens": {"type": "integer", "minimum": 1},
            },
        },
        "study": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "controlled": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "topic_levels": {
                            "type": "array",
                            "minItems": 1,
                            "items": {"type": "integer", "minimum": 1},
                        },
                        "persona_levels": {
                            "type": "array",
                            "minItems": 1,
                            "items": {"type": "integer", "minimum": 1},
                        },
                    },
                },
                "ablation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "restriction": {
                            "type": ["object", "null"],
                            "additionalProperties": {"type": "integer", "minimum": 1},
                        }
                    },
                },
                "likelihood": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dataset_sizes": {
                            "type": "array",
                            "minItems": 2,
                            "items": {"type": "integer", "minimum": 2},
                        },
                        "restriction": {
                            "type": ["object", "null"],
                            "additionalProperties": {"type": "integer", "minimum": 1},
                        },
                    },
                },
                "temperature": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "temperatures": {
                            "type": "array",
                            "minItems": 1,
                            "items": {"type": "number", "minimum": 0},
                        }
                    },
                },
            },
        },
        "judge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_url": {"type": ["string", "null"]},
                "model": {"type": ["string", "null"]},
                "api_key_env": {"type": "string"},
            },
        },
    },
}

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate_env(node):
    if isinstance(node, dict):
        return {k: _interpolate_env(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_interpolate_env(v) for v in node]
    if isinstance(node, str):
        def sub(m):
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable not set: {name}")
            return os.environ[name]

        return _ENV_PATTERN.sub(sub, node)
    return node


def _deep_merge(base: Dict, override: Dict) -> Dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_override(data: Dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = yaml.safe_load(raw)


def _validate(data: Dict) -> None:
    import jsonschema

    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        paths = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            paths.append(f"{path}: {e.message}")
        raise ConfigError("invalid config: " + "; ".join(paths))


def config_hash(data: Dict) -> str:
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    """Fully-resolved experiment configuration tree plus its content hash."""

    data: Dict[str, Any]

    def __post_init__(self):
        _validate(self.data)

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def out_dir(self) -> str:
        return self.data["out_dir"]

    def __getitem__(self, key: str):
        return self.data[key]

    def world_spec(self) -> WorldSpec:
        w = self.data["world"]
        return WorldSpec(seed=w["seed"], min_chunks=w["min_chunks"], max_chunks=w["max_chunks"])

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.data["model"]
        return ModelConfig(
            vocab_size=vocab_size,
            context_len=m["context_len"],
            n_layers=m["n_layers"],
            d_model=m["d_model"],
            n_heads=m["n_heads"],
            ff_mult=m["ff_mult"],
            init_scale=m["init_scale"],
            seed=self.seed,
        )

    def sample_config(self, mode: str, seed_offset: int = 0, temperature: Optional[float] = None) -> SampleConfig:
        s = self.data["sample"]
        return SampleConfig(
            temperature=s["temperature"] if temperature is None else temperature,
            top_p=s["top_p"],
            max_new_tokens=s["max_new_tokens"],
            mode=mode,
            n_samples=s["n_samples"],
            seed=self.seed * 1000003 + seed_offset,
        )


def default_config() -> Dict[str, Any]:
    return json.loads(json.dumps(DEFAULT_CONFIG))


def load_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Merge defaults <- YAML file <- --set overrides <- explicit flags."""
    data = default_config()
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        data = _deep_merge(data, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value: {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(data, dotted, raw)
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    data = _interpolate_env(data)
    return ExperimentConfig(data)


# ---------------------------------------------------------------- workspace

PRETRAIN_LINEAGES = ("pretrain-standard", "pretrain-annotated")


class Workspace:
    """Shared artifacts for one config: vocab, corpus, pretrained checkpoints.

    Pretrained checkpoints are cached on disk under `<out_dir>/checkpoints/` so
    studies run against the same config reuse them.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._vocab: Optional[Vocab] = None
        self._corpus: Optional[List[Dict]] = None
        self._pretrained: Dict[str, Checkpoint] = {}

    @property
    def vocab(self) -> Vocab:
        if self._vocab is None:
            self._vocab = build_vocab(world_lexicon(self.config.world_spec()))
        return self._vocab

    @property
    def corpus(self) -> List[Dict]:
        if self._corpus is None:
            p = self.config["pretrain"]
            self._corpus = build_pretraining_corpus(
                self.config.world_spec(), p["n_docs"], seed=self.config.seed
            )
        return self._corpus

    def checkpoint_dir(self) -> str:
        d = os.path.join(self.config.out_dir, "checkpoints")
        os.makedirs(d, exist_ok=True)
        return d

    def _pretrain_cache_key(self, regime: str) -> str:
        relevant = {
            "regime": regime,
            "seed": self.config.seed,
            "world": self.config["world"],
            "model": self.config["model"],
            "pretrain": self.config["pretrain"],
        }
        return config_hash(relevant)

    def pretrained(self, regime: str) -> Checkpoint:
        """Train (or load from cache) one pretraining lineage."""
        if regime not in PRETRAIN_LINEAGES:
            raise ConfigError(f"unknown pretraining lineage: {regime}")
        if regime in self._pretrained:
            return self._pretrained[regime]
        path = os.path.join(self.checkpoint_dir(), f"{regime}-{self._pretrain_cache_key(regime)}.ckpt")
        if os.path.exists(path):
            ckpt = load_checkpoint(path, expected_vocab=self.vocab)
        else:
            ckpt = self._run_pretrain(regime)
            save_checkpoint(ckpt, path)
        self._pretrained[regime] = ckpt
        return ckpt

    def _run_pretrain(self, regime: str) -> Checkpoint:
        p = self.config["pretrain"]
        vocab = self.vocab
        standard = [standard_document_ids(rec["chunks"], vocab) for rec in self.corpus]
        annotated = [interleave(AnnotatedDocument.from_record(rec), vocab) for rec in self.corpus]
        std, ann, _ = token_budget_match(standard, annotated, p["token_budget"])
        docs = std if regime == "pretrain-standard" else ann
        train_cfg = TrainConfig(
            regime=regime,
            lr_candidates=(p["lr"],),
            batch_size=p["batch_size"],
            token_budget=None,
            window=p["window"],
            seed=self.config.seed,
        )
        return pretrain(docs, train_cfg, self.config.model_config(len(vocab)), vocab)

    def sft(
        self,
        regime: str,
        init: Checkpoint,
        restriction: Optional[Dict] = None,
        n_examples: Optional[int] = None,
        seed_offset: int = 0,
    ) -> Tuple[Checkpoint, Dict[str, float]]:
        """Run one SFT condition; returns the checkpoint and dataset entropies."""
        s = self.config["sft"]
        n = n_examples if n_examples is not None else s["n_examples"]
        dataset = build_posttraining_subset(
            self.config.world_spec(), n, restriction, seed=self.config.seed + seed_offset
        )
        cfg = TrainConfig(
            regime=regime,
            lr_candidates=tuple(s["lr_candidates"]),
            batch_size=s["batch_size"],
            epochs=s["epochs"],
            val_fraction=s["val_fraction"],
            partial_unmask_prob=s["partial_unmask_prob"],
            seed=self.config.seed + seed_offset,
        )
        return posttrain(dataset, init, cfg, self.vocab), dataset.entropy_bits


# ---------------------------------------------------------------- study plumbing


@dataclass
class StudyResult:
    study: str
    config_hash: str
    seed: int
    fieldnames: List[str]
    rows: List[Dict[str, Any]]
    report: Dict[str, Any]
    generations: List[Dict[str, Any]] = field(default_factory=list)
    out_dir: Optional[str] = None


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    if value is None:
        return ""
    return str(value)


def write_outputs(result: StudyResult, out_root: str) -> str:
    """Persist metrics.csv / generations.jsonl / report.json for one study."""
    out_dir = os.path.join(out_root, result.study, result.config_hash)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=result.fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in result.fieldnames})
    with open(os.path.join(out_dir, "generations.jsonl"), "w", encoding="utf-8") as fh:
        for rec in result.generations:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "study": result.study,
                "config_hash": result.config_hash,
                "seed": result.seed,
                "report": result.report,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    result.out_dir = out_dir
    return out_dir


def _condition_prompts(cfg: ExperimentConfig, empty: bool = False) -> List[str]:
    n = cfg["sample"]["n_samples"]
    if empty:
        return [""] * n
    return [PROMPT_TEMPLATES[i % len(PROMPT_TEMPLATES)] for i in range(n)]


def _evaluate_condition(
    ws: Workspace,
    ckpt: Checkpoint,
    mode: str,
    condition: str,
    seed_offset: int,
    cfg: ExperimentConfig,
    empty_prompt: bool = False,
    temperature: Optional[float] = None,
):
    """Sample N generations and compute the entropy report for one condition."""
    sample_cfg = cfg.sample_config(mode, seed_offset=seed_offset, temperature=temperature)
    prompts = _condition_prompts(cfg, empty=empty_prompt)
    gens = batch_generate(ckpt, prompts, sample_cfg, ws.vocab)
    labeler = make_exact_labeler(cfg.world_spec())
    report = semantic_entropy(gens, labeler, bootstrap_seed=cfg.seed)
    gen_records = [{"condition": condition, **g.as_dict()} for g in gens]
    return gens, report, gen_records


def _ols_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.asarray(x, dtype=float), np.asarray(y, dtype=float), 1)[0])


# ---------------------------------------------------------------- studies


def run_controlled_study(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> StudyResult:
    """Decoupling study: output entropy vs post-training dataset entropy.

    For each restriction level of each attribute family, train sft-standard
    (from standard pretraining) and sft-anchored (from annotated pretraining),
    sample, label exactly, and fit per-regime least-squares slopes.
    """
    ws = ws or Workspace(cfg)
    std_base = ws.pretrained("pretrain-standard")
    ann_base = ws.pretrained("pretrain-annotated")
    families = [
        ("topic", cfg["study"]["controlled"]["topic_levels"]),
        ("persona", cfg["study"]["controlled"]["persona_levels"]),
    ]
    fieldnames = [
        "study", "config_hash", "seed", "family", "level", "regime",
        "dataset_entropy_bits", "output_entropy_bits", "mean_entropy_bits",
        "ci_lo", "ci_hi", "n_samples", "val_perplexity",
    ]
    rows: List[Dict] = []
    generations: List[Dict] = []
    points: Dict[Tuple[str, str], List[Tuple[float, float]]] = {}
    offset = 0
    for family, levels in families:
        for level in levels:
            restriction = {family: int(level)}
            for regime, base, mode in (
                ("sft-standard", std_base, "plain"),
                ("sft-anchored", ann_base, "anchored"),
            ):
                offset += 1
                ckpt, entropy_bits = ws.sft(regime, base, restriction, seed_offset=offset)
                condition = f"{family}-{level}-{regime}"
                _, rep, gen_recs = _evaluate_condition(ws, ckpt, mode, condition, offset, cfg)
                generations.extend(gen_recs)
                dataset_h = entropy_bits[family]
                output_h = rep.per_category[family]
                rows.append({
                    "study": "controlled", "config_hash": cfg.hash, "seed": cfg.seed,
                    "family": family, "level": level, "regime": regime,
                    "dataset_entropy_bits": dataset_h,
                    "output_entropy_bits": output_h,
                    "mean_entropy_bits": rep.mean_bits,
                    "ci_lo": rep.ci95[0], "ci_hi": rep.ci95[1],
                    "n_samples": rep.sample_count,
                    "val_perplexity": ckpt.meta.metrics.get("val_perplexity"),
                })
                points.setdefault((family, regime), []).append((dataset_h, output_h))
    slopes = {
        f"{family}/{regime}": _ols_slope([p[0] for p in ps], [p[1] for p in ps])
        for (family, regime), ps in sorted(points.items())
    }
    report = {"slopes": slopes}
    for family, _ in families:
        std = slopes[f"{family}/sft-standard"]
        anc = slopes[f"{family}/sft-anchored"]
        report[f"{family}_slope_ratio"] = anc / std if std != 0 else float("inf")
    return StudyResult("controlled", cfg.hash, cfg.seed, fieldnames, rows, report, generations)


ABLATION_ROWS = (
    "base-standard",
    "base-annotated",
    "sft-standard",
    "anchored",
    "anchored-from-standard-pretraining",
    "anchored-without-inference-annotations",
)


def run_ablation_grid(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> StudyResult:
    """Six-condition component ablation measured by mean semantic entropy."""
    ws = ws or Workspace(cfg)
    std_base = ws.pretrained("pretrain-standard")
    ann_base = ws.pretrained("pretrain-annotated")
    restriction = cfg["study"]["ablation"]["restriction"]
    anchored_ckpt, _ = ws.sft("sft-anchored", ann_base, restriction, seed_offset=101)
    sft_std_ckpt, _ = ws.sft("sft-standard", std_base, restriction, seed_offset=102)
    unmasked_ckpt, _ = ws.sft("sft-anchored-unmasked", std_base, restriction, seed_offset=103)
    conditions = [
        ("base-standard", std_base, "plain", True),
        ("base-annotated", ann_base, "plain", True),
        ("sft-standard", sft_std_ckpt, "plain", False),
        ("anchored", anchored_ckpt, "anchored", False),
        ("anchored-from-standard-pretraining", unmasked_ckpt, "anchored", False),
        ("anchored-without-inference-annotations", anchored_ckpt, "no-annotation", False),
    ]
    fieldnames = [
        "study", "config_hash", "seed", "condition",
        "mean_entropy_bits", "ci_lo", "ci_hi", "n_samples",
        "topic_entropy_bits", "persona_entropy_bits",
        "entity_entropy_bits", "location_entropy_bits",
    ]
    rows: List[Dict] = []
    generations: List[Dict] = []
    reports = {}
    for i, (name, ckpt, mode, empty) in enumerate(conditions):
        _, rep, gen_recs = _evaluate_condition(ws, ckpt, mode, name, 200 + i, cfg, empty_prompt=empty)
        generations.extend(gen_recs)
        reports[name] = rep
        rows.append({
            "study": "ablation", "config_hash": cfg.hash, "seed": cfg.seed,
            "condition": name,
            "mean_entropy_bits": rep.mean_bits,
            "ci_lo": rep.ci95[0], "ci_hi": rep.ci95[1],
            "n_samples": rep.sample_count,
            "topic_entropy_bits": rep.per_category["topic"],
            "persona_entropy_bits": rep.per_category["persona"],
            "entity_entropy_bits": rep.per_category["entity"],
            "location_entropy_bits": rep.per_category["location"],
        })
    anchored_h = reports["anchored"].mean_bits
    report = {
        "mean_entropy_bits": {name: reports[name].mean_bits for name in ABLATION_ROWS},
        "margins_vs_anchored": {
            name: anchored_h - reports[name].mean_bits
            for name in ABLATION_ROWS
            if name != "anchored"
        },
    }
    return StudyResult("ablation", cfg.hash, cfg.seed, fieldnames, rows, report, generations)


def run_likelihood_vs_diversity(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> StudyResult:
    """Sweep SFT dataset sizes for both regimes; correlate size with output
    entropy (Spearman) and record validation likelihood per point."""
    from scipy import stats

    ws = ws or Workspace(cfg)
    std_base = ws.pretrained("pretrain-standard")
    ann_base = ws.pretrained("pretrain-annotated")
    sizes = cfg["study"]["likelihood"]["dataset_sizes"]
    restriction = cfg["study"]["likelihood"]["restriction"]
    fieldnames = [
        "study", "config_hash", "seed", "regime", "dataset_size",
        "val_perplexity", "val_log_likelihood",
        "mean_entropy_bits", "ci_lo", "ci_hi", "n_samples",
    ]
    rows: List[Dict] = []
    generations: List[Dict] = []
    series: Dict[str, List[Tuple[int, float]]] = {"sft-standard": [], "sft-anchored": []}
    offset = 300
    for regime, base, mode in (
        ("sft-standard", std_base, "plain"),
        ("sft-anchored", ann_base, "anchored"),
    ):
        for size in sizes:
            offset += 1
            ckpt, _ = ws.sft(regime, base, restriction, n_examples=int(size), seed_offset=offset)
            condition = f"{regime}-n{size}"
            _, rep, gen_recs = _evaluate_condition(ws, ckpt, mode, condition, offset, cfg)
            generations.extend(gen_recs)
            ppl = ckpt.meta.metrics["val_perplexity"]
            rows.append({
                "study": "likelihood", "config_hash": cfg.hash, "seed": cfg.seed,
                "regime": regime, "dataset_size": size,
                "val_perplexity": ppl,
                "val_log_likelihood": -math.log(ppl),
                "mean_entropy_bits": rep.mean_bits,
                "ci_lo": rep.ci95[0], "ci_hi": rep.ci95[1],
                "n_samples": rep.sample_count,
            })
            series[regime].append((int(size), rep.mean_bits))
    report = {"spearman_size_vs_entropy": {}}
    for regime, pts in series.items():
        res = stats.spearmanr([p[0] for p in pts], [p[1] for p in pts])
        rho = res.statistic if hasattr(res, "statistic") else res.correlation
        report["spearman_size_vs_entropy"][regime] = float(rho)
    return StudyResult("likelihood", cfg.hash, cfg.seed, fieldnames, rows, report, generations)


def run_temperature_sweep(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> StudyResult:
    """Entropy and pairwise dissimilarity of the anchored model across
    temperatures; the quality column stays null without a judge endpoint."""
    ws = ws or Workspace(cfg)
    ann_base = ws.pretrained("pretrain-annotated")
    anchored_ckpt, _ = ws.sft("sft-anchored", ann_base, seed_offset=401)
    temps = cfg["study"]["temperature"]["temperatures"]
    fieldnames = [
        "study", "config_hash", "seed", "temperature",
        "mean_entropy_bits", "ci_lo", "ci_hi",
        "pairwise_dissimilarity", "quality", "n_samples",
    ]
    rows: List[Dict] = []
    generations: List[Dict] = []
    judge_cfg = cfg["judge"]
    has_judge = bool(judge_cfg.get("base_url")) and bool(judge_cfg.get("model"))
    for i, t in enumerate(temps):
        condition = f"anchored-T{t}"
        gens, rep, gen_recs = _evaluate_condition(
            ws, anchored_ckpt, "anchored", condition, 410 + i, cfg, temperature=float(t)
        )
        generations.extend(gen_recs)
        usable = [g for g in gens if g.response.strip()]
        if len(usable) >= 2:
            d, _ = pairwise_dissimilarity(usable, lambda text: bag_of_features_embed(text, ws.vocab))
        else:
            d = None
        quality = _judge_quality(usable, judge_cfg) if has_judge else None
        rows.append({
            "study": "temperature", "config_hash": cfg.hash, "seed": cfg.seed,
            "temperature": float(t),
            "mean_entropy_bits": rep.mean_bits,
            "ci_lo": rep.ci95[0], "ci_hi": rep.ci95[1],
            "pairwise_dissimilarity": d,
            "quality": quality,
            "n_samples": rep.sample_count,
        })
    report = {
        "temperatures": [float(t) for t in temps],
        "entropy_bits": [r["mean_entropy_bits"] for r in rows],
        "dissimilarity": [r["pairwise_dissimilarity"] for r in rows],
        "judge_configured": has_judge,
    }
    return StudyResult("temperature", cfg.hash, cfg.seed, fieldnames, rows, report, generations)


def _judge_quality(gens, judge_cfg) -> Optional[float]:
    """Mean 1-10 judge rating over responses; None when nothing parses."""
    from .client import EndpointConfig, complete

    endpoint = EndpointConfig(
        base_url=judge_cfg["base_url"],
        model=judge_cfg["model"],
        api_key_env=judge_cfg.get("api_key_env", "ANNOTATOR_API_KEY"),
    )
    scores = []
    for g in gens:
        prompt = (
            "Rate the overall quality of the following short story on a scale "
            "from 1 to 10. Reply with a single number.\n\n" + g.response
        )
        try:
            raw = complete(prompt, endpoint)
            scores.append(float(raw.strip().split()[0]))
        except (ValueError, IndexError, RuntimeError):
            continue
    return sum(scores) / len(scores) if scores else None


STUDIES = {
    "controlled": run_controlled_study,
    "ablation": run_ablation_grid,
    "likelihood": run_likelihood_vs_diversity,
    "temperature": run_temperature_sweep,
}


def run_study(name: str, cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> StudyResult:
    """Run one named study and persist its outputs under the config out_dir."""
    if name not in STUDIES:
        raise ConfigError(f"unknown study: {name} (expected one of {sorted(STUDIES)})")
    result = STUDIES[name](cfg, ws)
    write_outputs(result, os.path.join(cfg.out_dir, "results"))
    return result
