"""Substage distillation runs, teaching-assistant cascades, SKD and RSKD.

A *branch* is one cascade: teacher -> S_1 -> ... -> S_{N+1}, every hop a
:func:`distill_once` run with the same recipe. SKD trains three branches,
one per substage kind; RSKD trains three combination-stage (CS) branches,
each with a response backbone plus auxiliary substages. Both merge the final
branch students by parameter averaging (or, optionally, a logit ensemble).

Run directory layout::

    <run>/branch-<name>/rung-<i>/checkpoint.sdkw
                                 metrics.jsonl
                                 config-snapshot.yaml
                                 rung.json
    <run>/merged/checkpoint.sdkw
    <run>/run.json
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import yaml

from . import losses as L
from .data import ArrayDataset
from .errors import ConfigError, InputError, TrainingError
from .models import (
    NetworkSpec,
    TrainedWeights,
    build,
    extra_param_count,
    param_count,
    save_checkpoint,
)
from .training import (
    EvalReport,
    LossOutput,
    TrainingSchedule,
    evaluate,
    recalibrate_batchnorm,
    train,
)

log = logging.getLogger(__name__)


class SubstageKind(str, enum.Enum):
    RESPONSE = "response"
    FEATURE = "feature"
    RELATION = "relation"


@dataclass(frozen=True)
class CsRecipe:
    """Combination-stage branch: a backbone substage plus parallel auxiliaries.

    ``weights`` overrides the run-level :class:`LossWeights` for this branch.
    """

    auxiliaries: Tuple[SubstageKind, ...]
    backbone: SubstageKind = SubstageKind.RESPONSE
    weights: Optional[L.LossWeights] = None

    def __post_init__(self):
        object.__setattr__(self, "backbone", SubstageKind(self.backbone))
        object.__setattr__(self, "auxiliaries", tuple(SubstageKind(a) for a in self.auxiliaries))
        if not self.auxiliaries:
            raise ConfigError("a CS recipe needs at least one auxiliary substage")

    @property
    def kinds(self) -> Tuple[SubstageKind, ...]:
        return (self.backbone,) + tuple(a for a in self.auxiliaries if a != self.backbone)

    def describe(self) -> dict:
        return {
            "backbone": self.backbone.value,
            "auxiliaries": [a.value for a in self.auxiliaries],
            "weights": self.weights.as_dict() if self.weights else None,
        }


Recipe = Union[SubstageKind, CsRecipe]

SKD_BRANCHES = {
    "response": SubstageKind.RESPONSE,
    "feature": SubstageKind.FEATURE,
    "relation": SubstageKind.RELATION,
}

# Rp-CS carries both auxiliaries, Fe-CS and Re-CS one each, so the three
# branches differ in which auxiliary knowledge rides on the response backbone.
RSKD_BRANCHES = {
    "rp-cs": CsRecipe((SubstageKind.FEATURE, SubstageKind.RELATION)),
    "fe-cs": CsRecipe((SubstageKind.FEATURE,)),
    "re-cs": CsRecipe((SubstageKind.RELATION,)),
}


def recipe_kinds(recipe: Recipe) -> Tuple[SubstageKind, ...]:
    if isinstance(recipe, CsRecipe):
        return recipe.kinds
    return (SubstageKind(recipe),)


def describe_recipe(recipe: Recipe):
    return recipe.describe() if isinstance(recipe, CsRecipe) else SubstageKind(recipe).value


@dataclass
class DistillConfig:
    """Everything a distillation run needs beyond the networks and data."""

    weights: L.LossWeights = field(default_factory=lambda: L.LossWeights(k_channels=8))
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    feature_taps: Tuple[str, ...] = ("s1", "s2", "s3")
    fsp_pairs: Tuple[Tuple[str, str], ...] = (("s1_in", "s1"), ("s2_in", "s2"), ("s3_in", "s3"))
    t2_scaling: bool = True
    resize: bool = False
    n_cascade: int = 1
    ladder: str = "same"
    merge: str = "average"
    recalibrate_bn: bool = True
    shared_branch_init: bool = True
    parallel: bool = False
    seed: int = 0
    log_steps: bool = True
    skd_branches: Dict[str, Recipe] = field(default_factory=lambda: dict(SKD_BRANCHES))
    rskd_branches: Dict[str, CsRecipe] = field(default_factory=lambda: dict(RSKD_BRANCHES))

    def __post_init__(self):
        self.feature_taps = tuple(self.feature_taps)
        self.fsp_pairs = tuple(tuple(p) for p in self.fsp_pairs)
        if self.n_cascade < 0:
            raise ConfigError("n_cascade must be >= 0")
        if self.ladder not in ("same", "interpolated"):
            raise ConfigError("ladder must be 'same' or 'interpolated'")
        if self.merge not in ("average", "ensemble"):
            raise ConfigError("merge must be 'average' or 'ensemble'")

    def snapshot(self) -> dict:
        return {
            "weights": self.weights.as_dict(),
            "schedule": self.schedule.as_dict(),
            "feature_taps": list(self.feature_taps),
            "fsp_pairs": [list(p) for p in self.fsp_pairs],
            "t2_scaling": self.t2_scaling,
            "resize": self.resize,
            "n_cascade": self.n_cascade,
            "ladder": self.ladder,
            "merge": self.merge,
            "recalibrate_bn": self.recalibrate_bn,
            "shared_branch_init": self.shared_branch_init,
            "parallel": self.parallel,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# the per-step loss


def _stage_of(tap: str) -> str:
    return "stem" if tap == "stem" else tap[:2]


class Distiller(nn.Module):
    """Loss function for one teacher -> student hop.

    Holds the frozen teacher and any 1x1 channel adapters (student width to
    teacher width, one per stage) used by DF and FSP when widths differ. The
    adapters are trained with the student and discarded afterwards.
    """

    def __init__(self, teacher: TrainedWeights, student_spec: NetworkSpec, recipe: Recipe,
                 config: DistillConfig, adapter_seed: int = 0):
        super().__init__()
        self.recipe = recipe
        self.kinds = recipe_kinds(recipe)
        self.is_cs = isinstance(recipe, CsRecipe)
        self.weights = (recipe.weights if self.is_cs and recipe.weights else None) or config.weights
        self.config = config
        teacher_net = teacher.to_module().eval()
        for p in teacher_net.parameters():
            p.requires_grad_(False)
        self.__dict__["teacher"] = teacher_net  # not a submodule: excluded from parameters()
        t_spec, s_spec = teacher.spec, student_spec
        if t_spec.num_classes != s_spec.num_classes:
            raise ConfigError("teacher and student label spaces differ")

        taps = set()
        if SubstageKind.FEATURE in self.kinds:
            taps.update(config.feature_taps)
        if SubstageKind.RELATION in self.kinds:
            for a, b in config.fsp_pairs:
                taps.update((a, b))
        for tap in taps:
            for spec, who in ((t_spec, "teacher"), (s_spec, "student")):
                if tap not in spec.tap_names:
                    raise ConfigError(f"{who} network has no tap {tap!r}")
            if not config.resize and t_spec.tap_resolution(tap) != s_spec.tap_resolution(tap):
                raise ConfigError(f"tap {tap!r} resolution differs; enable resize")
        if SubstageKind.FEATURE in self.kinds and self.weights.beta:
            k = self.weights.k_channels
            for tap in config.feature_taps:
                if k > min(t_spec.tap_channels(tap), s_spec.tap_channels(tap)):
                    raise ConfigError(f"k_channels={k} exceeds channels at tap {tap!r}")
        self.taps = tuple(sorted(taps))

        gen = torch.Generator().manual_seed(adapter_seed)
        adapters = {}
        for tap in self.taps:
            stage = _stage_of(tap)
            c_t, c_s = t_spec.tap_channels(tap), s_spec.tap_channels(tap)
            if c_t != c_s and stage not in adapters:
                conv = nn.Conv2d(c_s, c_t, 1)
                with torch.no_grad():
                    nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5), generator=gen)
                    conv.bias.zero_()
                adapters[stage] = conv
        self.adapters = nn.ModuleDict(adapters)

    def train(self, mode: bool = True):
        super().train(mode)
        self.teacher.eval()
        return self

    def adapter(self, tap: str):
        return self.adapters[_stage_of(tap)] if _stage_of(tap) in self.adapters else None

    @property
    def extra_params(self) -> int:
        return extra_param_count(self.adapters)

    def components(self, s_logits, s_feats, t_logits, t_feats, y) -> Dict[str, torch.Tensor]:
        w, cfg = self.weights, self.config
        comps = {"ce": L.cross_entropy(s_logits, y)}
        if SubstageKind.RESPONSE in self.kinds:
            comps["response"] = L.response_term(s_logits, t_logits, w, cfg.t2_scaling)
        if SubstageKind.FEATURE in self.kinds:
            pairs = [(t_feats[t], s_feats[t]) for t in cfg.feature_taps]
            adapters = [self.adapter(t) for t in cfg.feature_taps]
            comps["feature"] = L.feature_term(pairs, w, adapters, cfg.resize)
        if SubstageKind.RELATION in self.kinds:
            g_t, g_s = [], []
            for a, b in cfg.fsp_pairs:
                g_t.append(L.fsp_matrix(t_feats[a], t_feats[b], cfg.resize))
                fa, fb = s_feats[a], s_feats[b]
                if self.adapter(a) is not None:
                    fa = self.adapter(a)(fa)
                if self.adapter(b) is not None:
                    fb = self.adapter(b)(fb)
                g_s.append(L.fsp_matrix(fa, fb, cfg.resize))
            comps["relation"] = L.relation_term(g_t, g_s, w)
        return comps

    def combine(self, comps: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Total loss from components, accumulated in float64."""
        wide = {k: v.double() for k, v in comps.items()}
        if self.is_cs:
            return L.rskd_total_loss(wide, self.weights)
        total = wide["ce"]
        for k in ("response", "feature", "relation"):
            if k in wide:
                total = total + wide[k]
        return total

    def forward(self, net, x, y) -> LossOutput:
        with torch.no_grad():
            t_logits, t_feats = self.teacher(x, taps=self.taps)
        s_logits, s_feats = net(x, taps=self.taps)
        comps = self.components(s_logits, s_feats, t_logits, t_feats, y)
        total = self.combine(comps)
        return LossOutput(total, {k: float(v.detach().double()) for k, v in comps.items()}, s_logits)


def recompute_total(components: Dict[str, float], recipe: Recipe, weights: L.LossWeights) -> float:
    """Total loss implied by logged components (the audit counterpart of ``combine``)."""
    if isinstance(recipe, CsRecipe):
        return float(L.rskd_total_loss(components, recipe.weights or weights))
    total = components["ce"]
    for k in ("response", "feature", "relation"):
        if k in components:
            total = total + components[k]
    return total


# ---------------------------------------------------------------------------
# single hop


@dataclass
class DistillResult:
    weights: TrainedWeights
    records: List[dict]
    teacher_digest: str
    output_digest: str
    init_digest: str
    extra_params: int
    report: Optional[EvalReport] = None
    path: Optional[Path] = None


def _write_yaml(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=False))


def distill_once(
    teacher: TrainedWeights,
    student_spec: NetworkSpec,
    recipe: Recipe,
    data: ArrayDataset,
    schedule: Optional[TrainingSchedule] = None,
    config: Optional[DistillConfig] = None,
    val_data: Optional[ArrayDataset] = None,
    run_dir=None,
    init_seed: int = 0,
) -> DistillResult:
    """Train a freshly initialized ``student_spec`` from ``teacher`` under ``recipe``."""
    config = config or DistillConfig()
    schedule = schedule or config.schedule
    run_dir = Path(run_dir) if run_dir else None
    student = build(student_spec, init_seed)
    distiller = Distiller(teacher, student_spec, recipe, config, adapter_seed=init_seed)
    teacher_digest = teacher.digest()
    if run_dir:
        _write_yaml(run_dir / "config-snapshot.yaml", {
            "recipe": describe_recipe(recipe),
            "teacher": {"spec": teacher.spec.to_dict(), "digest": teacher_digest},
            "student": {"spec": student_spec.to_dict(), "init_seed": init_seed},
            "schedule": schedule.as_dict(),
            "distill": config.snapshot(),
            "effective_weights": distiller.weights.as_dict(),
        })
    try:
        weights, tlog = train(
            student, distiller, data, schedule, val_data=val_data,
            metrics_path=run_dir / "metrics.jsonl" if run_dir else None,
            log_steps=config.log_steps,
        )
    except TrainingError as exc:
        if run_dir and exc.last_good is not None:
            save_checkpoint(exc.last_good, run_dir / "checkpoint.last-good.sdkw")
        raise
    report = evaluate(weights, val_data) if val_data is not None else None
    result = DistillResult(
        weights=weights,
        records=tlog.records,
        teacher_digest=teacher_digest,
        output_digest=weights.digest(),
        init_digest=student.digest(),
        extra_params=distiller.extra_params,
        report=report,
        path=run_dir,
    )
    if run_dir:
        save_checkpoint(weights, run_dir / "checkpoint.sdkw",
                        meta={"teacher_digest": teacher_digest, "recipe": describe_recipe(recipe)})
        (run_dir / "rung.json").write_text(json.dumps({
            "teacher_digest": teacher_digest,
            "output_digest": result.output_digest,
            "init_digest": result.init_digest,
            "extra_params": result.extra_params,
            "student_params": param_count(weights),
            "report": report.to_dict() if report else None,
        }, indent=2))
    return result


# ---------------------------------------------------------------------------
# cascades


def spec_params(spec: NetworkSpec) -> int:
    from .models import Network

    return sum(p.numel() for p in Network(spec).parameters())


@dataclass(frozen=True)
class CascadeLadder:
    """Teacher, N assistants and the final student, largest first."""

    rungs: Tuple[NetworkSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "rungs", tuple(self.rungs))
        if len(self.rungs) < 2:
            raise ConfigError("a ladder needs at least a teacher and a student")
        counts = [spec_params(s) for s in self.rungs]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"ladder capacities must be non-increasing, got {counts}")
        classes = {s.num_classes for s in self.rungs}
        if len(classes) != 1:
            raise ConfigError("all ladder rungs must share the label space")

    @property
    def depth(self) -> int:
        """Number of assistants N."""
        return len(self.rungs) - 2

    @classmethod
    def same_architecture(cls, teacher: NetworkSpec, student: NetworkSpec, n: int) -> "CascadeLadder":
        """Assistants share the student's architecture (re-initialized each hop)."""
        return cls((teacher,) + (student,) * (n + 1))

    @classmethod
    def interpolated(cls, teacher: NetworkSpec, student: NetworkSpec, n: int) -> "CascadeLadder":
        """Assistants geometrically interpolate width and linearly interpolate depth."""
        rungs = [teacher]
        w_t = teacher.widths[0] / student.base_widths[0]
        w_s = student.width_multiplier
        b_t, b_s = teacher.blocks_per_stage, student.blocks_per_stage
        for j in range(1, n + 1):
            frac = j / (n + 1)
            width = w_t * (w_s / w_t) ** frac
            blocks = max(b_s, round(b_t + (b_s - b_t) * frac))
            rungs.append(replace(student, width_multiplier=round(width, 4), depth=6 * blocks + 2))
        rungs.append(student)
        return cls(tuple(rungs))


def make_ladder(teacher: NetworkSpec, student: NetworkSpec, config: DistillConfig) -> CascadeLadder:
    if config.ladder == "same":
        return CascadeLadder.same_architecture(teacher, student, config.n_cascade)
    return CascadeLadder.interpolated(teacher, student, config.n_cascade)


@dataclass
class CascadeResult:
    weights: TrainedWeights
    rungs: List[DistillResult]

    @property
    def extra_params(self) -> int:
        return sum(r.extra_params for r in self.rungs)


def rung_seed(config: DistillConfig, rung: int, branch_index: int = 0) -> int:
    base = 1000 * config.seed + rung
    return base if config.shared_branch_init else base + 100 * branch_index


def cascade(
    teacher: TrainedWeights,
    ladder: CascadeLadder,
    recipe: Recipe,
    data: ArrayDataset,
    schedule: Optional[TrainingSchedule] = None,
    config: Optional[DistillConfig] = None,
    val_data: Optional[ArrayDataset] = None,
    run_dir=None,
    branch_index: int = 0,
) -> CascadeResult:
    """Distill down the ladder; rung i's output becomes rung i+1's teacher."""
    config = config or DistillConfig()
    schedule = schedule or config.schedule
    if teacher.spec != ladder.rungs[0]:
        raise ConfigError("teacher weights do not match the ladder's first rung")
    current = teacher
    results = []
    for i, student_spec in enumerate(ladder.rungs[1:]):
        sched = replace(schedule, seed=schedule.seed + i)
        rdir = Path(run_dir) / f"rung-{i}" if run_dir else None
        try:
            res = distill_once(current, student_spec, recipe, data, sched, config, val_data, rdir,
                               init_seed=rung_seed(config, i, branch_index))
        except TrainingError as exc:
            raise TrainingError(f"cascade rung {i} failed: {exc}", exc.last_good, rung=i) from exc
        results.append(res)
        current = res.weights
        log.info("rung %d done: %s", i, res.report)
    return CascadeResult(current, results)


# ---------------------------------------------------------------------------
# merging


def integrate_weights(branches: Sequence[TrainedWeights]) -> TrainedWeights:
    """Elementwise arithmetic mean of every named tensor.

    Values are sorted along the branch axis before a float64 sum, so the
    result does not depend on branch order.
    """
    if not branches:
        raise InputError("nothing to integrate")
    first = branches[0]
    for b in branches[1:]:
        if b.spec_fingerprint != first.spec_fingerprint or b.entries.keys() != first.entries.keys():
            raise InputError("cannot integrate weights of different networks")
    out = {}
    for name, ref in first.entries.items():
        stack = np.stack([b.entries[name].detach().cpu().numpy().astype(np.float64) for b in branches])
        mean = np.sort(stack, axis=0).sum(axis=0) / len(branches)
        out[name] = torch.from_numpy(mean).to(ref.dtype)
    return TrainedWeights(first.spec, out, first.spec_fingerprint)


class LogitEnsemble:
    """Averages member logits; an evaluator, not a deployable network."""

    def __init__(self, members: Sequence[TrainedWeights]):
        self.members = list(members)
        self._nets = [m.to_module().eval() for m in self.members]

    def logits(self, x):
        with torch.no_grad():
            return torch.stack([net(x, taps=())[0] for net in self._nets]).mean(0)


@dataclass
class StagedResult:
    """Outcome of :func:`skd_train` / :func:`rskd_train`."""

    mode: str
    weights: TrainedWeights
    averaged: TrainedWeights
    branches: Dict[str, CascadeResult]
    ensemble: LogitEnsemble
    merge: str = "average"
    path: Optional[Path] = None

    @property
    def n_runs(self) -> int:
        return sum(len(b.rungs) for b in self.branches.values())

    @property
    def extra_params(self) -> int:
        return sum(b.extra_params for b in self.branches.values())

    def final_model(self):
        """What the configured merge produces: averaged weights or the ensemble."""
        return self.ensemble if self.merge == "ensemble" else self.weights


def _staged_train(mode, branches, teacher, student_spec, data, config, val_data, run_dir):
    ladder = make_ladder(teacher.spec, student_spec, config)
    run_dir = Path(run_dir) if run_dir else None

    def run_branch(item):
        index, (name, recipe) = item
        bdir = run_dir / f"branch-{name}" if run_dir else None
        return name, cascade(teacher, ladder, recipe, data, config.schedule, config, val_data,
                             bdir, branch_index=index)

    items = list(enumerate(branches.items()))
    if config.parallel:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            done = dict(pool.map(run_branch, items))
    else:
        done = dict(run_branch(it) for it in items)
    done = {name: done[name] for name in branches}

    finals = [r.weights for r in done.values()]
    averaged = integrate_weights(finals)
    merged = recalibrate_batchnorm(averaged, data) if config.recalibrate_bn else averaged
    result = StagedResult(mode, merged, averaged, done, LogitEnsemble(finals), config.merge, run_dir)
    if run_dir:
        save_checkpoint(merged, run_dir / "merged" / "checkpoint.sdkw",
                        meta={"mode": mode, "recalibrated": config.recalibrate_bn})
        summary = {
            "mode": mode,
            "merge": config.merge,
            "ladder": [s.to_dict() for s in ladder.rungs],
            "branches": {n: describe_recipe(r) for n, r in branches.items()},
            "n_runs": result.n_runs,
            "extra_params": result.extra_params,
            "teacher_digest": teacher.digest(),
            "merged_digest": merged.digest(),
            "config": config.snapshot(),
        }
        if val_data is not None:
            summary["merged_report"] = evaluate(merged, val_data).to_dict()
            summary["ensemble_report"] = evaluate(result.ensemble, val_data).to_dict()
        (run_dir / "run.json").write_text(json.dumps(summary, indent=2))
    return result


def skd_train(teacher: TrainedWeights, student_spec: NetworkSpec, data: ArrayDataset,
              config: Optional[DistillConfig] = None, val_data=None, run_dir=None) -> StagedResult:
    """Three independent substage cascades (response, feature, relation), then averaged."""
    config = config or DistillConfig()
    return _staged_train("skd", config.skd_branches, teacher, student_spec, data, config, val_data, run_dir)


def rskd_train(teacher: TrainedWeights, student_spec: NetworkSpec, data: ArrayDataset,
               config: Optional[DistillConfig] = None, val_data=None, run_dir=None) -> StagedResult:
    """Three combination-stage cascades (Rp-CS, Fe-CS, Re-CS), then averaged."""
    config = config or DistillConfig()
    return _staged_train("rskd", config.rskd_branches, teacher, student_spec, data, config, val_data, run_dir)
