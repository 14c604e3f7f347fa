"""Run configuration: sectioned ``key = value`` files, env fallback, flag overrides.

Layout::

    [run]          seed, folds, target_length, pipelines, output_dir, tau, jobs,
                   manifest, labels, aux_manifest, aux_labels
    [model]        any ModelConfig field except input_length (= target_length)
    [pipeline]     fields shared by every pipeline (epochs, batch_size, lr, ...)
    [pipeline.N]   per-pipeline overrides

Seed priority, lowest first: built-in default, ``ECGRA_SEED``, the file, flags.
Unless a section sets its own seed, the run seed also seeds the model and
every pipeline.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UsageError
from .model import ModelConfig
from .training import PIPELINES, PipelineConfig

SEED_ENV = "ECGRA_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    folds: int = 10
    target_length: int = 15000
    pipelines: tuple[int, ...] = PIPELINES
    output_dir: str = "runs"
    tau: float = 0.5
    jobs: int = 0  # 0 = one worker per available core
    manifest: str = ""
    labels: str = ""
    aux_manifest: str = ""
    aux_labels: str = ""
    model: dict = field(default_factory=dict)
    pipeline_common: dict = field(default_factory=dict)
    pipeline_overrides: dict = field(default_factory=dict)  # pid -> {key: value}

    def model_config(self) -> ModelConfig:
        kw = {"seed": self.seed, **self.model, "input_length": self.target_length}
        try:
            return ModelConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"[model]: {exc}") from None

    def pipeline_config(self, pid: int) -> PipelineConfig:
        kw = {"seed": self.seed, **self.pipeline_common, **self.pipeline_overrides.get(pid, {})}
        if self.aux_manifest and pid == 2 and "aux_dataset" not in kw:
            kw["aux_dataset"] = self.aux_manifest
        try:
            return PipelineConfig.default(pid, **kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"[pipeline.{pid}]: {exc}") from None

    def pipeline_configs(self) -> list[PipelineConfig]:
        return [self.pipeline_config(p) for p in self.pipelines]

    @property
    def effective_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)


_RUN_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "input_length"}
_PIPE_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig) if f.name != "pipeline_id"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind: str, text: str):
    text = text.strip()
    if kind.startswith("int | None") or kind.startswith("str | None"):
        if text.lower() in ("", "none"):
            return None
        kind = kind.split(" |")[0]
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _parse_bool(text)
    if kind.startswith("tuple"):
        return tuple(int(t) for t in text.replace(",", " ").split())
    return text


def _typed(fields: dict, section: str, key: str, text: str):
    if key not in fields:
        raise UsageError(f"[{section}]: unknown key {key!r}")
    kind = fields[key] if isinstance(fields[key], str) else fields[key].type
    try:
        return _convert(str(kind), text)
    except ValueError as exc:
        raise UsageError(f"[{section}] {key}: {exc}") from None


def apply(rc: RunConfig, section: str, key: str, text: str) -> None:
    """Set one ``section.key`` from its text form."""
    if section == "run":
        if key in ("model", "pipeline_common", "pipeline_overrides"):
            raise UsageError(f"[run]: unknown key {key!r}")
        setattr(rc, key, _typed(_RUN_TYPES, section, key, text))
    elif section == "model":
        rc.model[key] = _typed(_MODEL_FIELDS, section, key, text)
    elif section == "pipeline":
        rc.pipeline_common[key] = _typed(_PIPE_FIELDS, section, key, text)
    elif section.startswith("pipeline."):
        try:
            pid = int(section.split(".", 1)[1])
        except ValueError:
            raise UsageError(f"bad section name [{section}]") from None
        if pid not in PIPELINES:
            raise UsageError(f"[{section}]: pipelines are numbered {PIPELINES}")
        rc.pipeline_overrides.setdefault(pid, {})[key] = _typed(_PIPE_FIELDS, section, key, text)
    else:
        raise UsageError(f"unknown config section [{section}]")


def load_run_config(path=None, overrides: dict[str, str] | None = None, env=None) -> RunConfig:
    """Build the effective config. ``overrides`` maps ``section.key`` to text."""
    env = os.environ if env is None else env
    rc = RunConfig()
    if env.get(SEED_ENV, "").strip():
        apply(rc, "run", "seed", env[SEED_ENV])
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
        if not read:
            raise UsageError(f"cannot read config file {path}")
        base = Path(path).resolve().parent
        for section in parser.sections():
            for key, text in parser.items(section):
                apply(rc, section, key, text)
        for key in ("manifest", "labels", "aux_manifest", "aux_labels", "output_dir"):
            val = getattr(rc, key)
            if val and not Path(val).is_absolute():
                setattr(rc, key, os.path.normpath(base / val))
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        apply(rc, section or "run", key, text)
    # validate eagerly so bad values fail before any work starts
    rc.model_config()
    rc.pipeline_configs()
    return rc


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def resolved_text(rc: RunConfig) -> str:
    """Fully expanded config; loading it back reproduces the same run."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: _fmt(getattr(rc, k)) for k in _RUN_TYPES
                 if k not in ("model", "pipeline_common", "pipeline_overrides")}
    mc = rc.model_config()
    cp["model"] = {k: _fmt(getattr(mc, k)) for k in _MODEL_FIELDS}
    for pid in rc.pipelines:
        pc = rc.pipeline_config(pid)
        cp[f"pipeline.{pid}"] = {k: _fmt(getattr(pc, k)) for k in _PIPE_FIELDS}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in cp[section].items()]
        lines.append("")
    return "\n".join(lines)


def write_resolved(rc: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.resolved"
    path.write_text(resolved_text(rc))
    return path
