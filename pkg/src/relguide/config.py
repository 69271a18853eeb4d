"""Run configuration: a flat ``key = value`` text format mapped onto typed sections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .fusion import FusionConfig
from .relational import RelationalConfig
from .synthworld import Corruption, SceneConfig, SyntheticVFM
from .training import TrainConfig
from .upsampler import UpsamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    source: int = 0
    iterations: int = 500
    depth_iterations: int = 500
    lr: float = 1e-2
    train_scenes: int = 6
    test_scenes: int = 4
    bins: int = 256
    depth: bool = True


@dataclass(frozen=True)
class TrainSection:
    lam: float = 0.5
    lr: float = 2e-4
    weight_decay: float = 1e-5
    batch: int = 2
    iterations: int = 2000
    crop: int = 32
    coarse_stride: int = 8
    fine_stride: int = 2
    scenes: int = 16
    sources: tuple = (0, 1)
    guidance: tuple = (2, 3)


def default_vfms():
    return (
        SyntheticVFM(seed=101, stride=8, channels=16),
        SyntheticVFM(seed=102, stride=8, channels=24, corruption=Corruption("misalign", shift=(1, 0), blur=1)),
        SyntheticVFM(seed=201, stride=2, channels=16, corruption=Corruption("artifact", rate=0.05, magnitude=10.0)),
        SyntheticVFM(seed=202, stride=2, channels=24, corruption=Corruption("artifact", rate=0.05, magnitude=10.0)),
    )


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    vfms: tuple = field(default_factory=default_vfms)
    relational: RelationalConfig = field(default_factory=RelationalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    strategy: str = "sa"
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        for i in (*t.sources, *t.guidance, self.probe.source):
            if not 0 <= i < len(self.vfms):
                raise ConfigError(f"extractor index {i} is not configured")
        scale = t.coarse_stride // t.fine_stride
        return TrainConfig(
            lam=t.lam,
            lr=t.lr,
            weight_decay=t.weight_decay,
            batch=t.batch,
            iterations=t.iterations,
            seed=seed,
            crop=t.crop,
            coarse_stride=t.coarse_stride,
            fine_stride=t.fine_stride,
            fusion=self.strategy,
            sources=tuple(self.vfms[i] for i in t.sources),
            guidance=tuple(self.vfms[i] for i in t.guidance),
            relational=replace(self.relational, window=self.relational.window),
            fusion_cfg=self.fusion,
            upsampler=replace(self.upsampler, scale=scale, seed=seed),
        )

    def with_overrides(self, text: str) -> "RunConfig":
        return parse_config(text, self)


# ---------------------------------------------------------------- text format

def _parse_value(raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "opt_float":
            return None if raw.lower() in ("none", "") else float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}") from exc


def _kind(dc, name):
    for f in fields(dc):
        if f.name == name:
            if name == "temperature":
                return "opt_float"
            t = f.type if isinstance(f.type, str) else f.type.__name__
            if t.startswith("tuple") or name in ("sources", "guidance", "widths", "kernels", "shift"):
                return "ints"
            return {"int": int, "float": float, "bool": bool, "str": str}.get(t, str)
    raise ConfigError(f"unknown key {name!r}")


_SECTIONS = {
    "scene": ("scene", SceneConfig),
    "relational": ("relational", RelationalConfig),
    "fusion": ("fusion", FusionConfig),
    "upsampler": ("upsampler", UpsamplerConfig),
    "train": ("train", TrainSection),
    "probe": ("probe", ProbeConfig),
}

_VFM_KEYS = {"seed": int, "stride": int, "channels": int, "corruption": str, "rate": float,
             "magnitude": float, "shift": "ints", "blur": int}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (defaults when omitted).

    Blank lines and ``#`` comments are ignored; unknown keys raise ConfigError.
    """
    cfg = RunConfig() if base is None else base
    sections: dict = {}
    vfm_edits: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if parts[0] == "vfm":
            if len(parts) != 3 or not parts[1].isdigit() or parts[2] not in _VFM_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            vfm_edits.setdefault(int(parts[1]), {})[parts[2]] = _parse_value(raw, _VFM_KEYS[parts[2]])
        elif key == "fusion.strategy":
            sections["strategy"] = raw
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            attr, dc = _SECTIONS[parts[0]]
            try:
                kind = _kind(dc, parts[1])
            except ConfigError:
                raise ConfigError(f"line {lineno}: unknown key {key!r}") from None
            sections.setdefault(attr, {})[parts[1]] = _parse_value(raw, kind)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        updates = {}
        for attr, vals in sections.items():
            if attr == "strategy":
                if vals not in ("sa", "mean"):
                    raise ConfigError(f"unknown fusion strategy {vals!r}")
                updates["strategy"] = vals
            else:
                updates[attr] = replace(getattr(cfg, attr), **vals)
        if vfm_edits:
            vfms = list(cfg.vfms)
            for i in sorted(vfm_edits):
                if i > len(vfms):
                    raise ConfigError(f"vfm.{i} defined before vfm.{len(vfms)}")
                updates_i = vfm_edits[i]
                cur = vfms[i] if i < len(vfms) else SyntheticVFM(seed=i)
                corr = cur.corruption
                ckeys = {k: updates_i.pop(k) for k in ("rate", "magnitude", "shift", "blur") if k in updates_i}
                if "corruption" in updates_i:
                    corr = Corruption(updates_i.pop("corruption"), **{**_corr_defaults(corr), **ckeys})
                elif ckeys:
                    corr = replace(corr, **ckeys)
                new = replace(cur, corruption=corr, **updates_i)
                if i < len(vfms):
                    vfms[i] = new
                else:
                    vfms.append(new)
            updates["vfms"] = tuple(vfms)
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _corr_defaults(c: Corruption):
    return {"rate": c.rate, "magnitude": c.magnitude, "shift": c.shift, "blur": c.blur}


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Render every key; ``parse_config(dump_config(c)) == c``."""
    lines = []

    def emit(prefix, obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{prefix}.{f.name} = {v}")

    emit("scene", cfg.scene)
    for i, v in enumerate(cfg.vfms):
        c = v.corruption
        lines += [
            f"vfm.{i}.seed = {v.seed}",
            f"vfm.{i}.stride = {v.stride}",
            f"vfm.{i}.channels = {v.channels}",
            f"vfm.{i}.corruption = {c.kind}",
            f"vfm.{i}.rate = {c.rate}",
            f"vfm.{i}.magnitude = {c.magnitude}",
            f"vfm.{i}.shift = {c.shift[0]},{c.shift[1]}",
            f"vfm.{i}.blur = {c.blur}",
        ]
    emit("relational", cfg.relational)
    emit("fusion", cfg.fusion)
    lines.append(f"fusion.strategy = {cfg.strategy}")
    emit("upsampler", cfg.upsampler)
    emit("train", cfg.train)
    emit("probe", cfg.probe)
    return "\n".join(lines) + "\n"
