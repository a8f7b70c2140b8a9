"""Experiment configuration: JSON parsing, validation and defaults.

Unknown keys are rejected. Errors carry the line of the offending key when it
can be found in the source text.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .calibrate import DEFAULT_BUDGET, ThresholdGrid, ValidationItem
from .errors import ConfigError, DSDError
from .latency import ClusterConfig
from .netsim import DETERMINISTIC, UNIFORM_JITTER, LatencySampler
from .token_model import IID, MARKOV, TokenModel, check_context
from .verifier import KeyCriteria

SWEEP_PARAMETERS = ("tau", "n_nodes", "t1", "gamma")

# Divergent 6-token pair: the target strongly prefers token i+1 after i, the
# draft is flatter and over-weights i+2. Top target tokens get flagged key by
# the gap clause while the draft's favourite mistakes stay relaxable.
DEFAULT_CONFIG: dict[str, Any] = {
    "run_id": "dsd",
    "draft": {
        "kind": MARKOV,
        "matrix": [
            [0.10, 0.35, 0.30, 0.10, 0.10, 0.05],
            [0.05, 0.10, 0.35, 0.30, 0.10, 0.10],
            [0.10, 0.05, 0.10, 0.35, 0.30, 0.10],
            [0.10, 0.10, 0.05, 0.10, 0.35, 0.30],
            [0.30, 0.10, 0.10, 0.05, 0.10, 0.35],
            [0.35, 0.30, 0.10, 0.10, 0.05, 0.10],
        ],
        "initial": [0.2, 0.2, 0.2, 0.2, 0.1, 0.1],
        "temperature": 1.0,
    },
    "target": {
        "kind": MARKOV,
        "matrix": [
            [0.05, 0.60, 0.15, 0.10, 0.05, 0.05],
            [0.05, 0.05, 0.60, 0.15, 0.10, 0.05],
            [0.05, 0.05, 0.05, 0.60, 0.15, 0.10],
            [0.10, 0.05, 0.05, 0.05, 0.60, 0.15],
            [0.15, 0.10, 0.05, 0.05, 0.05, 0.60],
            [0.60, 0.15, 0.10, 0.05, 0.05, 0.05],
        ],
        "initial": [0.3, 0.3, 0.1, 0.1, 0.1, 0.1],
        "temperature": 1.0,
    },
    "prompt": [0],
    "gamma": 8,
    "tau": 0.2,
    "criteria": {"lambda1": 2.0, "lambda2": 0.2, "lambda3": 0.3, "top_m": 10},
    "cluster": {"n_nodes": 8, "t0_ms": 1.0, "t1_ms": 5.0},
    "sampler": {"kind": DETERMINISTIC, "jitter_halfwidth_ms": 0.0},
    "max_new": 256,
    "seeds": [0, 1, 2],
}

TOP_KEYS = {
    "run_id", "draft", "target", "prompt", "gamma", "tau", "criteria", "cluster",
    "sampler", "max_new", "seeds", "sweep", "verify", "calibration",
}


@dataclass(frozen=True)
class Sweep:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class VerifySettings:
    horizon: int = 3
    gamma: int | None = None
    random_instances: int = 0
    random_vocab: int = 4


@dataclass(frozen=True)
class CalibrationSettings:
    items: tuple[ValidationItem, ...]
    gamma: int = 3
    tau: float | None = None
    budget: float = DEFAULT_BUDGET
    grid: ThresholdGrid = field(default_factory=ThresholdGrid)


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    draft: TokenModel
    target: TokenModel
    prompt: tuple[int, ...]
    gamma: int
    tau: float
    criteria: KeyCriteria
    cluster: ClusterConfig
    jitter_halfwidth: float
    max_new: int
    seeds: tuple[int, ...]
    sweep: Sweep | None = None
    verify: VerifySettings = field(default_factory=VerifySettings)
    calibration: CalibrationSettings | None = None

    @property
    def sampler(self) -> LatencySampler:
        return LatencySampler.for_cluster(self.cluster, self.jitter_halfwidth)

    def with_parameter(self, name: str, value) -> ExperimentConfig:
        """Copy with one sweep parameter replaced."""
        if name == "tau":
            return replace(self, tau=float(value))
        if name == "gamma":
            return replace(self, gamma=int(value))
        if name == "n_nodes":
            return replace(self, cluster=replace(self.cluster, n_nodes=int(value)))
        if name == "t1":
            return replace(self, cluster=replace(self.cluster, link_latency=float(value)))
        raise ValueError(f"unknown sweep parameter {name!r}")


class _Parser:
    def __init__(self, text: str | None, source: str):
        self.text = text
        self.source = source

    def line_of(self, path: tuple) -> int | None:
        if self.text is None:
            return None
        pos, line = 0, None
        for part in path:
            if isinstance(part, int):
                continue
            idx = self.text.find(f'"{part}"', pos)
            if idx < 0:
                break
            pos = idx + 1
            line = self.text.count("\n", 0, idx) + 1
        return line

    def fail(self, path: tuple, msg: str):
        name = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{name}: {msg}", self.line_of(path), self.source)

    def obj(self, node, path, allowed, required=()):
        if not isinstance(node, dict):
            self.fail(path, f"expected an object, got {type(node).__name__}")
        for key in node:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        for key in required:
            if key not in node:
                self.fail(path, f"missing required key {key!r}")
        return node

    def number(self, node, path, *, integer=False):
        if isinstance(node, str) and not integer and node.lower() in ("inf", "infinity"):
            return math.inf
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            self.fail(path, f"expected a number, got {node!r}")
        if integer:
            if int(node) != node:
                self.fail(path, f"expected an integer, got {node!r}")
            return int(node)
        return float(node)

    def int_list(self, node, path):
        if not isinstance(node, list):
            self.fail(path, "expected a list")
        return tuple(self.number(v, path + (i,), integer=True) for i, v in enumerate(node))

    def build(self, path, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (TypeError, ValueError, DSDError) as exc:
            self.fail(path, str(exc))

    def model(self, node, path) -> TokenModel:
        self.obj(node, path, {"kind", "probs", "matrix", "initial", "temperature"}, ("kind",))
        kind = node["kind"]
        temp = self.number(node.get("temperature", 1.0), path + ("temperature",))
        if temp < 0:
            self.fail(path + ("temperature",), f"must be >= 0, got {temp}")
        if kind == IID:
            self.obj(node, path, {"kind", "probs", "temperature"}, ("probs",))
            return self.build(path + ("probs",), TokenModel.iid, node["probs"], temp)
        if kind == MARKOV:
            self.obj(node, path, {"kind", "matrix", "initial", "temperature"}, ("matrix", "initial"))
            return self.build(path + ("matrix",), TokenModel.markov, node["matrix"], node["initial"], temp)
        self.fail(path + ("kind",), f"unknown model kind {kind!r}; expected {IID!r} or {MARKOV!r}")

    def criteria(self, node, path) -> KeyCriteria:
        self.obj(node, path, {"lambda1", "lambda2", "lambda3", "top_m"})
        vals = {}
        for key in ("lambda1", "lambda2", "lambda3"):
            if key in node:
                vals[key] = self.number(node[key], path + (key,))
        if "top_m" in node:
            vals["top_m"] = self.number(node["top_m"], path + ("top_m",), integer=True)
        for key, v in vals.items():
            try:
                replace(KeyCriteria(), **{key: v})
            except ValueError as exc:
                self.fail(path + (key,), str(exc))
        return KeyCriteria(**vals)

    def grid(self, node, path) -> ThresholdGrid:
        self.obj(node, path, {"lambda1", "lambda2", "lambda3", "top_m"})
        vals = {}
        for key in ("lambda1", "lambda2", "lambda3"):
            if key in node:
                if not isinstance(node[key], list) or not node[key]:
                    self.fail(path + (key,), "expected a non-empty list")
                vals[key] = tuple(self.number(v, path + (key, i)) for i, v in enumerate(node[key]))
        if "top_m" in node:
            vals["top_m"] = self.number(node["top_m"], path + ("top_m",), integer=True)
        g = ThresholdGrid(**vals)
        self.build(path, g.points)
        return g

    def parse(self, raw: dict) -> ExperimentConfig:
        self.obj(raw, (), TOP_KEYS)
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        for key, value in raw.items():
            # partial cluster/criteria/sampler sections fill in from the defaults
            if key in ("criteria", "cluster", "sampler") and isinstance(value, dict):
                cfg[key] = {**cfg[key], **value}
            else:
                cfg[key] = value

        run_id = cfg["run_id"]
        if not isinstance(run_id, str) or not run_id or "," in run_id:
            self.fail(("run_id",), "expected a non-empty string without commas")
        draft = self.model(cfg["draft"], ("draft",))
        target = self.model(cfg["target"], ("target",))
        if draft.vocab_size != target.vocab_size:
            self.fail(("target",), f"vocab size {target.vocab_size} differs from draft's {draft.vocab_size}")
        prompt = self.int_list(cfg["prompt"], ("prompt",))
        self.build(("prompt",), check_context, prompt, target.vocab_size)

        gamma = self.number(cfg["gamma"], ("gamma",), integer=True)
        if gamma < 1:
            self.fail(("gamma",), f"must be >= 1, got {gamma}")
        tau = self.number(cfg["tau"], ("tau",))
        if not 0 <= tau <= 1:
            self.fail(("tau",), f"must be in [0, 1], got {tau}")
        crit = self.criteria(cfg["criteria"], ("criteria",))

        cl = self.obj(cfg["cluster"], ("cluster",), {"n_nodes", "t0_ms", "t1_ms"}, ("n_nodes", "t0_ms", "t1_ms"))
        n_nodes = self.number(cl["n_nodes"], ("cluster", "n_nodes"), integer=True)
        if n_nodes < 1:
            self.fail(("cluster", "n_nodes"), f"must be >= 1, got {n_nodes}")
        t0 = self.number(cl["t0_ms"], ("cluster", "t0_ms"))
        if not 0 < t0 < math.inf:
            self.fail(("cluster", "t0_ms"), f"must be positive and finite, got {t0}")
        t1 = self.number(cl["t1_ms"], ("cluster", "t1_ms"))
        if not 0 <= t1 < math.inf:
            self.fail(("cluster", "t1_ms"), f"must be non-negative and finite, got {t1}")
        cluster = self.build(("cluster",), ClusterConfig, n_nodes, t0, t1)
        sm = self.obj(cfg["sampler"], ("sampler",), {"kind", "jitter_halfwidth_ms"})
        kind = sm.get("kind", DETERMINISTIC)
        jitter = self.number(sm.get("jitter_halfwidth_ms", 0.0), ("sampler", "jitter_halfwidth_ms"))
        if kind not in (DETERMINISTIC, UNIFORM_JITTER):
            self.fail(("sampler", "kind"), f"unknown sampler kind {kind!r}")
        if kind == DETERMINISTIC and jitter != 0:
            self.fail(("sampler", "jitter_halfwidth_ms"), "deterministic sampler cannot have jitter")
        if kind == UNIFORM_JITTER and not 0 < jitter <= cluster.link_latency:
            self.fail(("sampler", "jitter_halfwidth_ms"), "must be in (0, cluster.t1_ms]")

        max_new = self.number(cfg["max_new"], ("max_new",), integer=True)
        if max_new < 1:
            self.fail(("max_new",), f"must be >= 1, got {max_new}")
        seeds = self.int_list(cfg["seeds"], ("seeds",))
        if not seeds:
            self.fail(("seeds",), "need at least one seed")

        config = ExperimentConfig(
            run_id=run_id, draft=draft, target=target, prompt=prompt, gamma=gamma, tau=tau,
            criteria=crit, cluster=cluster, jitter_halfwidth=jitter, max_new=max_new, seeds=seeds,
        )
        if "sweep" in cfg:
            config = replace(config, sweep=self.sweep(cfg["sweep"], config))
        if "verify" in cfg:
            config = replace(config, verify=self.verify(cfg["verify"]))
        if "calibration" in cfg:
            config = replace(config, calibration=self.calibration(cfg["calibration"]))
        return config

    def sweep(self, node, base: ExperimentConfig) -> Sweep:
        path = ("sweep",)
        self.obj(node, path, {"parameter", "values"}, ("parameter", "values"))
        param = node["parameter"]
        if param not in SWEEP_PARAMETERS:
            self.fail(path + ("parameter",), f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMETERS}")
        if not isinstance(node["values"], list) or not node["values"]:
            self.fail(path + ("values",), "expected a non-empty list")
        integer = param in ("n_nodes", "gamma")
        values = tuple(self.number(v, path + ("values", i), integer=integer) for i, v in enumerate(node["values"]))
        for v in values:
            try:
                swept = base.with_parameter(param, v)
            except ValueError as exc:
                self.fail(path + ("values",), str(exc))
            if not 0 <= swept.tau <= 1:
                self.fail(path + ("values",), f"tau value {v} outside [0, 1]")
            if swept.gamma < 1:
                self.fail(path + ("values",), f"gamma value {v} must be >= 1")
            if base.jitter_halfwidth > swept.cluster.link_latency:
                self.fail(path + ("values",), f"t1 value {v} is below the sampler jitter")
        return Sweep(param, values)

    def verify(self, node) -> VerifySettings:
        path = ("verify",)
        self.obj(node, path, {"horizon", "gamma", "random_instances", "random_vocab"})
        vals = {k: self.number(v, path + (k,), integer=True) for k, v in node.items()}
        for k, v in vals.items():
            if v < (0 if k == "random_instances" else 1):
                self.fail(path + (k,), f"out of range: {v}")
        return VerifySettings(**vals)

    def calibration(self, node) -> CalibrationSettings:
        path = ("calibration",)
        self.obj(node, path, {"items", "gamma", "tau", "budget", "grid"}, ("items",))
        if not isinstance(node["items"], list) or not node["items"]:
            self.fail(path + ("items",), "expected a non-empty list")
        items = []
        for i, it in enumerate(node["items"]):
            ipath = path + ("items", i)
            self.obj(it, ipath, {"prompt", "draft", "target", "horizon"}, ("draft", "target", "horizon"))
            d = self.model(it["draft"], ipath + ("draft",))
            t = self.model(it["target"], ipath + ("target",))
            if d.vocab_size != t.vocab_size:
                self.fail(ipath + ("target",), "draft and target vocab sizes differ")
            prompt = self.int_list(it.get("prompt", []), ipath + ("prompt",))
            self.build(ipath + ("prompt",), check_context, prompt, t.vocab_size)
            horizon = self.number(it["horizon"], ipath + ("horizon",), integer=True)
            if horizon < 1:
                self.fail(ipath + ("horizon",), "must be >= 1")
            items.append(ValidationItem(prompt, d, t, horizon))
        vals = {}
        if "gamma" in node:
            vals["gamma"] = self.number(node["gamma"], path + ("gamma",), integer=True)
            if vals["gamma"] < 1:
                self.fail(path + ("gamma",), "must be >= 1")
        if "tau" in node:
            vals["tau"] = self.number(node["tau"], path + ("tau",))
            if not 0 <= vals["tau"] <= 1:
                self.fail(path + ("tau",), f"must be in [0, 1], got {vals['tau']}")
        if "budget" in node:
            vals["budget"] = self.number(node["budget"], path + ("budget",))
            if not 0 < vals["budget"] < 1:
                self.fail(path + ("budget",), f"must be in (0, 1), got {vals['budget']}")
        if "grid" in node:
            vals["grid"] = self.grid(node["grid"], path + ("grid",))
        return CalibrationSettings(tuple(items), **vals)


def parse_config(raw: dict, text: str | None = None, source: str = "<config>") -> ExperimentConfig:
    return _Parser(text, source).parse(raw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load a JSON config file, or the built-in defaults when ``path`` is None."""
    if path is None:
        return parse_config({}, None, "<default>")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", None, str(path)) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, str(path)) from exc
    return parse_config(raw, text, str(path))
