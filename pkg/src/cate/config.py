"""Experiment configuration: one YAML file plus ``key.sub=value`` overrides.

Schema (every section optional, defaults shown in :data:`DEFAULTS`)::

    space:      {name: nb101|darts, min_nodes, max_nodes, attribute}
    data:       {num_cells, seed, min_nodes, max_nodes, path}
    pair:       {delta, k, attribute, split}
    corruption: {rate, mask_fraction, random_fraction, seed}
    encoder:    {n_layers, n_cross_layers, n_heads, d_model, d_ff, direction, mask_kind}
    train:      {epochs, batch_size, lr, betas, weight_decay, seed}
    benchmark:  {seed, records}
    search:     {algorithms, budget, seeds, encoding, checkpoint, universe_size,
                 universe_seed, init, top_k, predictor_epochs, population, tournament, k}
    compare:    {schemes, algorithms}
    workers:    int
    out:        directory

``data.min_nodes``/``data.max_nodes`` restrict the pre-training dataset
independently of the search space (outside-space generalization runs).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .darts import DARTS_SPACE, random_darts_cell, transform_darts_cell
from .encoder import EncoderConfig
from .encodings import SCHEMES
from .pretrain import CorruptionConfig, PairSampleConfig, TrainConfig
from .search import ALGORITHMS
from .space import NB101_SPACE, CellGraph, SpaceSpec, as_rng, canonical_hash, sample_distinct_cells

SPACES = {"nb101": NB101_SPACE, "darts": DARTS_SPACE}

DEFAULTS: dict = {
    "space": {"name": "nb101", "min_nodes": None, "max_nodes": None, "attribute": None},
    "data": {"num_cells": 5000, "seed": 0, "min_nodes": None, "max_nodes": None, "path": None},
    "pair": {"delta": 1.0, "k": 32, "attribute": "params", "split": 0.95},
    "corruption": {"rate": 0.2, "mask_fraction": 0.8, "random_fraction": 0.2, "seed": 0},
    "encoder": {"n_layers": 4, "n_cross_layers": 4, "n_heads": 4, "d_model": 32, "d_ff": 64,
                "direction": "uni", "mask_kind": "indirect"},
    "train": {"epochs": 5, "batch_size": 64, "lr": 1e-3, "betas": [0.9, 0.999], "weight_decay": 0.01, "seed": 0},
    "benchmark": {"seed": 0, "records": None},
    "search": {"algorithms": ["random", "local", "cate-dngo-ls"], "budget": 150, "seeds": [0],
               "encoding": "cate-uni", "checkpoint": None, "universe_size": 10000, "universe_seed": 0,
               "init": 10, "top_k": 5, "predictor_epochs": 100, "population": 20, "tournament": 5, "k": 10},
    "compare": {"schemes": ["adjacency-onehot", "path-onehot", "cate-uni"], "algorithms": ["dngo", "cate-dngo-ls"]},
    "workers": 1,
    "out": "runs/default",
}

# algorithms whose behaviour depends on the encoding scheme
ENCODING_ALGORITHMS = ("local-latent", "dngo", "mlp", "cate-dngo-ls")


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown field (known: {sorted(base)})")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: expected a mapping, got {type(val).__name__}")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b=value`` in place; ``value`` is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.sub=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    try:
        node[parts[-1]] = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{key}: unparsable value {text!r}: {e}") from None


def parse_seed_list(text: str) -> list[int]:
    """``"0,3,5"`` or ``"0-199"`` or a mix of both."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"search.seeds: cannot parse seed list {text!r}") from None
    return seeds


@dataclass
class ExperimentConfig:
    raw: dict
    space: SpaceSpec
    data_space: SpaceSpec
    pair: PairSampleConfig
    corruption: CorruptionConfig
    encoder: EncoderConfig
    train: TrainConfig
    search: dict
    compare: dict
    benchmark: dict
    data: dict
    workers: int
    out: Path
    source: Path | None = field(default=None)

    @property
    def checkpoint_path(self) -> Path:
        ck = self.search["checkpoint"]
        return Path(ck) if ck else self.out / "checkpoint.npz"

    @property
    def seeds(self) -> list[int]:
        return list(self.search["seeds"])


def _section(raw: dict, name: str, cls, **extra):
    try:
        return cls(**raw[name], **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def build_config(raw_in: dict | None, source: Path | None = None) -> ExperimentConfig:
    raw = _merge(DEFAULTS, raw_in or {})
    sp = raw["space"]
    if sp["name"] not in SPACES:
        raise ConfigError(f"space.name: unknown space {sp['name']!r} (known: {sorted(SPACES)})")
    base = SPACES[sp["name"]]
    try:
        space = base.with_nodes(sp["min_nodes"] or base.min_nodes, sp["max_nodes"] or base.max_nodes)
        if sp["attribute"]:
            space = SpaceSpec(space.vocab, space.max_nodes, space.max_edges, sp["attribute"], space.min_nodes,
                              space.edge_prob)
        d = raw["data"]
        data_space = space.with_nodes(d["min_nodes"] or space.min_nodes, d["max_nodes"] or space.max_nodes)
    except ValueError as e:
        raise ConfigError(f"space: {e}") from None
    if sp["name"] == "darts" and (space.min_nodes != 15 or data_space.max_nodes != 15):
        raise ConfigError("space: darts cells always have 15 nodes")
    if space.attribute not in ("params", "flops"):
        raise ConfigError(f"space.attribute: must be params or flops, got {space.attribute!r}")
    if not isinstance(d["num_cells"], int) or d["num_cells"] < 2:
        raise ConfigError(f"data.num_cells: need an integer >= 2, got {d['num_cells']!r}")

    pair = _section(raw, "pair", PairSampleConfig)
    corruption = _section(raw, "corruption", CorruptionConfig)
    encoder = _section(raw, "encoder", EncoderConfig, vocab_size=space.vocab.size, max_nodes=space.max_nodes)
    tr = dict(raw["train"])
    if not (isinstance(tr["betas"], (list, tuple)) and len(tr["betas"]) == 2):
        raise ConfigError("train.betas: need two numbers")
    tr["betas"] = tuple(float(b) for b in tr["betas"])
    try:
        train = TrainConfig(**tr)
    except TypeError as e:
        raise ConfigError(f"train: {e}") from None
    if train.epochs < 1 or train.batch_size < 1 or not train.lr > 0:
        raise ConfigError("train: epochs and batch_size must be >= 1 and lr > 0")

    s = raw["search"]
    if isinstance(s["seeds"], str):
        s["seeds"] = parse_seed_list(s["seeds"])
    elif isinstance(s["seeds"], int):
        s["seeds"] = list(range(s["seeds"]))
    if not s["seeds"] or not all(isinstance(x, int) for x in s["seeds"]):
        raise ConfigError("search.seeds: need a non-empty list of integers")
    if len(set(s["seeds"])) != len(s["seeds"]):
        raise ConfigError("search.seeds: duplicate seeds")
    if not isinstance(s["budget"], int) or s["budget"] < 1:
        raise ConfigError(f"search.budget: need an integer >= 1, got {s['budget']!r}")
    for alg in list(s["algorithms"]) + list(raw["compare"]["algorithms"]):
        if alg not in ALGORITHMS:
            raise ConfigError(f"search.algorithms: unknown algorithm {alg!r} (known: {list(ALGORITHMS)})")
    for sch in [s["encoding"], *raw["compare"]["schemes"]]:
        if sch not in SCHEMES:
            raise ConfigError(f"search.encoding: unknown scheme {sch!r} (known: {list(SCHEMES)})")
    if s["init"] < s["top_k"]:
        raise ConfigError(f"search.init: {s['init']} is smaller than top_k {s['top_k']}")
    if s["budget"] < s["init"] and any(a in ("dngo", "mlp", "cate-dngo-ls") for a in s["algorithms"]):
        raise ConfigError(f"search.init: {s['init']} exceeds budget {s['budget']}")
    if s["population"] > s["budget"] and "rea" in s["algorithms"]:
        raise ConfigError("search.population: exceeds budget")
    if s["checkpoint"] and not Path(s["checkpoint"]).exists():
        raise ConfigError(f"search.checkpoint: file {s['checkpoint']} does not exist")
    if raw["data"]["path"] and not Path(raw["data"]["path"]).exists():
        raise ConfigError(f"data.path: file {raw['data']['path']} does not exist")
    if raw["benchmark"]["records"] and not Path(raw["benchmark"]["records"]).exists():
        raise ConfigError(f"benchmark.records: file {raw['benchmark']['records']} does not exist")
    if not isinstance(raw["workers"], int) or raw["workers"] < 1:
        raise ConfigError("workers: need an integer >= 1")
    return ExperimentConfig(raw, space, data_space, pair, corruption, encoder, train, s, raw["compare"],
                            raw["benchmark"], raw["data"], raw["workers"], Path(raw["out"]), source)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"--config: file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"--config: invalid YAML: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("--config: top level must be a mapping")
    for ov in overrides or []:
        apply_override(raw, ov)
    return build_config(raw, path)


def sample_cells(space: SpaceSpec, count: int, seed: int) -> list[CellGraph]:
    """Distinct random cells of either supported space."""
    if space.vocab is not DARTS_SPACE.vocab:
        return sample_distinct_cells(space, count, seed)
    rng = as_rng(seed)
    seen: set[str] = set()
    cells: list[CellGraph] = []
    for _ in range(50 * count + 1000):
        if len(cells) == count:
            break
        c = transform_darts_cell(random_darts_cell(rng))
        h = canonical_hash(c)
        if h not in seen:
            seen.add(h)
            cells.append(c)
    if len(cells) < count:
        raise ConfigError(f"data.num_cells: only {len(cells)} distinct cells could be drawn")
    return cells
