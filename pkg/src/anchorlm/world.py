"""Synthetic story world with exactly known latent semantics.

Documents are rendered from templates over four categorical attributes
(topic, persona, entity, location). Every rendered chunk carries the surface
phrase of each attribute, so a trained model's generations can be labeled
exactly by phrase matching instead of an external judge.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "TOPICS",
    "PERSONAS",
    "ENTITIES",
    "LOCATIONS",
    "CATEGORIES",
    "OTHER_LABEL",
    "WorldSpec",
    "SemanticLatent",
    "DocumentSample",
    "SftExample",
    "SftDataset",
    "sample_latent",
    "render_document",
    "render_chunk",
    "exact_label",
    "world_lexicon",
    "build_pretraining_corpus",
    "build_posttraining_subset",
    "write_jsonl",
    "read_jsonl",
]

TOPICS: Tuple[str, ...] = (
    "space exploration", "gardens", "talking animals", "treasure hunts",
    "hidden treasures", "the sky", "fairy tales", "the arts",
    "secret societies", "outer space", "school life", "riddles",
    "undercover missions", "seasonal changes", "invisibility", "holidays",
    "mystical creatures", "dream worlds", "living objects",
    "subterranean worlds", "enchanted forests", "dinosaurs",
    "shape-shifting", "bygone eras", "underwater adventures",
    "unusual vehicles", "a deadline or time limit", "superheroes",
    "island adventures", "robots and technology", "mysterious maps",
    "alien encounters", "sibling rivalry", "magical lands",
    "royal kingdoms", "virtual worlds", "cultural traditions",
    "lost civilizations", "miniature worlds", "sports", "time travel",
    "haunted places", "magical objects", "lost cities", "fantasy worlds",
    "pirates", "giant creatures", "snowy adventures",
)

PERSONAS: Tuple[str, ...] = (
    "an innocent author", "someone who loves order and structure",
    "a hopeless romantic", "a hurt ill-intentioned person",
    "a wise old person who wants to teach the young", "a father",
    "a powerful leader", "the everyman", "a philosopher",
    "an explorer archetype", "someone who wants to prove a point",
    "a pedant", "someone curious", "a cruel person", "an academic",
    "a jester archetype", "a poet", "someone evil", "a child", "a mother",
    "a moralistic teacher", "a rebellious author", "the oppressed",
)

ENTITIES: Tuple[str, ...] = (
    "Mira", "Finn", "Odette", "Basil", "Juniper", "Casper", "Amara", "Theo",
    "Isolde", "Rufus", "Nadia", "Pip", "Greta", "Soren", "Talia", "Edwin",
)

LOCATIONS: Tuple[str, ...] = (
    "harbor", "meadow", "lighthouse", "hamlet", "ridge", "canyon", "marsh",
    "workshop", "attic", "cavern", "bakery", "valley", "glacier", "grove",
    "plaza", "belltower",
)

CATEGORIES: Tuple[str, ...] = ("topic", "persona", "entity", "location")

OTHER_LABEL = "OTHER"

# chunk sentence templates; slot words stay out of every catalog phrase so
# phrase matching is exact on rendered text
_SCENE_TEMPLATES: Tuple[str, ...] = (
    "{entity} lingered near the {location} while dreaming of {topic}",
    "down by the {location} {entity} whispered rumors of {topic}",
    "{entity} paced across the {location} chasing thoughts of {topic}",
    "inside the {location} {entity} sketched scenes of {topic}",
)

_VOICE_TEMPLATES: Tuple[str, ...] = (
    "every line here sounds like {persona} musing on {topic}",
    "it reads as if {persona} were praising {topic}",
    "told by {persona} the scene keeps circling back to {topic}",
    "only {persona} could frame {topic} this way",
)

PROMPT_TEMPLATES: Tuple[str, ...] = (
    "please share one short story",
    "tell me another small story",
    "could you spin some story for me",
)

TAG_KEYS: Tuple[str, ...] = CATEGORIES


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticLatent:
    """One draw of the world's latent attributes."""

    topic: str
    persona: str
    entity: str
    location: str

    def as_dict(self) -> Dict[str, str]:
        return {
            "topic": self.topic,
            "persona": self.persona,
            "entity": self.entity,
            "location": self.location,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "SemanticLatent":
        return cls(d["topic"], d["persona"], d["entity"], d["location"])


@dataclass
class DocumentSample:
    latent: SemanticLatent
    chunks: List[str]
    prompt: Optional[str] = None

    @property
    def text(self) -> str:
        return "\n\n".join(self.chunks)


@dataclass
class WorldSpec:
    """Attribute catalogs plus the seed that derives all world randomness."""

    topics: Tuple[str, ...] = TOPICS
    personas: Tuple[str, ...] = PERSONAS
    entities: Tuple[str, ...] = ENTITIES
    locations: Tuple[str, ...] = LOCATIONS
    seed: int = 0
    min_chunks: int = 2
    max_chunks: int = 5

    def __post_init__(self):
        for name, cat in self.catalogs().items():
            if not cat:
                raise WorldError(f"empty catalog: {name}")
            if len(set(cat)) != len(cat):
                raise WorldError(f"duplicate values in catalog: {name}")
            _check_no_phrase_containment(name, cat)
        if not (1 <= self.min_chunks <= self.max_chunks):
            raise WorldError("invalid chunk count range")

    def catalogs(self) -> Dict[str, Tuple[str, ...]]:
        return {
            "topic": tuple(self.topics),
            "persona": tuple(self.personas),
            "entity": tuple(self.entities),
            "location": tuple(self.locations),
        }


def _check_no_phrase_containment(name: str, catalog: Sequence[str]) -> None:
    """Within one catalog, no phrase may appear as a contiguous word run
    inside another, or first-occurrence labeling would be ambiguous."""
    split = [tuple(p.split()) for p in catalog]
    for i, a in enumerate(split):
        for j, b in enumerate(split):
            if i == j or len(a) > len(b):
                continue
            for k in range(len(b) - len(a) + 1):
                if b[k : k + len(a)] == a:
                    raise WorldError(
                        f"catalog {name}: {catalog[i]!r} occurs inside {catalog[j]!r}"
                    )


Restriction = Dict[str, Union[int, Sequence[str]]]


def _allowed_values(spec: WorldSpec, restriction: Optional[Restriction]) -> Dict[str, Tuple[str, ...]]:
    cats = spec.catalogs()
    if not restriction:
        return cats
    out = dict(cats)
    for attr, allowed in restriction.items():
        if attr not in cats:
            raise WorldError(f"unknown attribute in restriction: {attr}")
        if isinstance(allowed, int):
            if not (1 <= allowed <= len(cats[attr])):
                raise WorldError(f"restriction size out of range for {attr}: {allowed}")
            out[attr] = cats[attr][:allowed]
        else:
            allowed = tuple(allowed)
            if not allowed:
                raise WorldError(f"empty restriction set for {attr}")
            for v in allowed:
                if v not in cats[attr]:
                    raise WorldError(f"restriction value not in catalog {attr}: {v!r}")
            out[attr] = allowed
    return out


def sample_latent(
    spec: WorldSpec,
    rng: np.random.Generator,
    restriction: Optional[Restriction] = None,
) -> SemanticLatent:
    """Each attribute uniform over its allowed set, independent across attributes."""
    allowed = _allowed_values(spec, restriction)
    return SemanticLatent(
        topic=allowed["topic"][rng.integers(len(allowed["topic"]))],
        persona=allowed["persona"][rng.integers(len(allowed["persona"]))],
        entity=allowed["entity"][rng.integers(len(allowed["entity"]))],
        location=allowed["location"][rng.integers(len(allowed["location"]))],
    )


def render_chunk(latent: SemanticLatent, rng: np.random.Generator) -> str:
    scene = _SCENE_TEMPLATES[rng.integers(len(_SCENE_TEMPLATES))]
    voice = _VOICE_TEMPLATES[rng.integers(len(_VOICE_TEMPLATES))]
    return (
        scene.format(entity=latent.entity, location=latent.location, topic=latent.topic)
        + " "
        + voice.format(persona=latent.persona, topic=latent.topic)
    )


def render_document(
    spec: WorldSpec, latent: SemanticLatent, rng: np.random.Generator
) -> DocumentSample:
    """2..5 chunks, each carrying all four attribute phrases."""
    n = int(rng.integers(spec.min_chunks, spec.max_chunks + 1))
    chunks = [render_chunk(latent, rng) for _ in range(n)]
    return DocumentSample(latent=latent, chunks=chunks)


def exact_label(text: str, spec: WorldSpec) -> SemanticLatent:
    """Per-attribute label by earliest catalog-phrase occurrence; absent -> OTHER.

    Matching is on whole words (contiguous runs), so a phrase inside a longer
    unrelated word never matches. Ties at the same start position go to the
    longer phrase.
    """
    words = text.split()
    labels: Dict[str, str] = {}
    for attr, catalog in spec.catalogs().items():
        best_pos, best_len, best_val = len(words) + 1, -1, OTHER_LABEL
        for value in catalog:
            phrase = value.split()
            pos = _find_phrase(words, phrase)
            if pos >= 0 and (pos < best_pos or (pos == best_pos and len(phrase) > best_len)):
                best_pos, best_len, best_val = pos, len(phrase), value
        labels[attr] = best_val
    return SemanticLatent(
        topic=labels["topic"],
        persona=labels["persona"],
        entity=labels["entity"],
        location=labels["location"],
    )


def _find_phrase(words: List[str], phrase: List[str]) -> int:
    m = len(phrase)
    for i in range(len(words) - m + 1):
        if words[i : i + m] == phrase:
            return i
    return -1


def world_lexicon(spec: WorldSpec) -> List[str]:
    """Every surface word the world can ever emit (catalogs, templates, tag
    keys, prompts), in deterministic order. Used to build the shared vocab."""
    seen: Dict[str, None] = {}

    def add_text(t: str):
        for w in t.split():
            seen.setdefault(w, None)

    for key in TAG_KEYS:
        add_text(key)
    for cat in spec.catalogs().values():
        for v in cat:
            add_text(v)
    for tpl in _SCENE_TEMPLATES + _VOICE_TEMPLATES:
        add_text(tpl.format(entity="", location="", topic="", persona=""))
    for p in PROMPT_TEMPLATES:
        add_text(p)
    return list(seen)


# -- corpus / dataset construction -----------------------------------------------


def chunk_annotations(doc: DocumentSample) -> List[List[Dict[str, str]]]:
    """Ground-truth per-chunk tag lists in fixed key order."""
    tags = [{"key": k, "value": getattr(doc.latent, k)} for k in TAG_KEYS]
    return [list(tags) for _ in doc.chunks]


def document_record(doc_id: int, doc: DocumentSample) -> Dict:
    rec = {
        "doc_id": doc_id,
        "latent": doc.latent.as_dict(),
        "chunks": list(doc.chunks),
        "annotations": chunk_annotations(doc),
    }
    if doc.prompt is not None:
        rec["prompt"] = doc.prompt
    return rec


def write_jsonl(records: Iterable[Dict], path: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str) -> List[Dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def build_pretraining_corpus(
    spec: WorldSpec,
    n_docs: int,
    seed: int,
    out_dir: Optional[str] = None,
    shard_size: int = 10000,
) -> List[Dict]:
    """Documents with unrestricted latents. If out_dir is given, also writes
    JSONL shards shard-00000.jsonl, ... with per-shard derived seeds."""
    if n_docs <= 0:
        raise WorldError("n_docs must be positive")
    records: List[Dict] = []
    n_shards = (n_docs + shard_size - 1) // shard_size
    for shard_idx in range(n_shards):
        rng = np.random.default_rng([seed, shard_idx])
        start = shard_idx * shard_size
        count = min(shard_size, n_docs - start)
        shard = []
        for i in range(count):
            latent = sample_latent(spec, rng)
            doc = render_document(spec, latent, rng)
            shard.append(document_record(start + i, doc))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_jsonl(shard, os.path.join(out_dir, f"shard-{shard_idx:05d}.jsonl"))
        records.extend(shard)
    return records


@dataclass
class SftExample:
    prompt: str
    response: str
    tags: List[Dict[str, str]]
    latent: SemanticLatent


@dataclass
class SftDataset:
    examples: List[SftExample]
    restriction: Optional[Restriction]
    entropy_bits: Dict[str, float]  # log2(allowed support) per attribute

    def __len__(self) -> int:
        return len(self.examples)


def build_posttraining_subset(
    spec: WorldSpec,
    n_examples: int,
    restriction: Optional[Restriction],
    seed: int,
) -> SftDataset:
    """Fixed-size prompt/response pairs with ground-truth annotations.

    Restricted attributes are uniform over their allowed subsets; unrestricted
    attributes stay uniform over the full catalogs. Dataset-entropy metadata
    is log2 of the allowed support per attribute.
    """
    if n_examples <= 0:
        raise WorldError("n_examples must be positive")
    allowed = _allowed_values(spec, restriction)
    rng = np.random.default_rng([seed, 1])
    examples: List[SftExample] = []
    for _ in range(n_examples):
        latent = sample_latent(spec, rng, restriction)
        prompt = PROMPT_TEMPLATES[rng.integers(len(PROMPT_TEMPLATES))]
        response = render_chunk(latent, rng)
        tags = [{"key": k, "value": getattr(latent, k)} for k in TAG_KEYS]
        examples.append(SftExample(prompt, response, tags, latent))
    entropy_bits = {attr: math.log2(len(vals)) for attr, vals in allowed.items()}
    return SftDataset(examples=examples, restriction=restriction, entropy_bits=entropy_bits)
