"""Run configuration: one flat key=value file fully determines a run.

Keys are namespaced (``decoder.layers=6``), parsed against a typed schema,
and hashed canonically so every artifact can carry the configuration
fingerprint it was produced under.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .competition import CompetitionConfig, CompetitionToggles
from .decoder import DecoderConfig
from .scenegen import SceneConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration input."""


def _cast_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _cast_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    competition: CompetitionConfig = field(default_factory=CompetitionConfig)
    toggles: CompetitionToggles = field(default_factory=CompetitionToggles.all)
    seed: int = 0
    train_scenes: int = 64
    val_scenes: int = 16
    data_dir: str = "data"
    out_dir: str = "out"
    analysis_thresholds: tuple[float, ...] = (0.25, 0.5, 0.75)

    # ------------------------------------------------------------------

    def validate(self) -> None:
        try:
            self.scene.validate()
            self.decoder.validate()
            self.train.validate()
            self.loss.validate()
            self.competition.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.train_scenes < 1 or self.val_scenes < 0:
            raise ConfigError(
                f"run.train_scenes must be >= 1 and run.val_scenes >= 0, "
                f"got {self.train_scenes}/{self.val_scenes}"
            )
        if (self.toggles.qcl or self.toggles.rre) and self.decoder.layers < 2:
            raise ConfigError("competition.qcl / competition.rre require decoder.layers >= 2")

    def items(self) -> dict[str, str]:
        """Canonical flat view of every key (used for hashing and dumps)."""
        sc, dc, tr, lw, cc, tg = (self.scene, self.decoder, self.train,
                                  self.loss, self.competition, self.toggles)
        return {
            "scene.instance_count_min": repr(sc.instance_count_range[0]),
            "scene.instance_count_max": repr(sc.instance_count_range[1]),
            "scene.points_per_instance_min": repr(sc.points_per_instance_range[0]),
            "scene.points_per_instance_max": repr(sc.points_per_instance_range[1]),
            "scene.extent": repr(sc.extent),
            "scene.cluster_std": repr(sc.cluster_std),
            "scene.voxel_size": repr(sc.voxel_size),
            "scene.class_count": repr(sc.class_count),
            "scene.color_noise": repr(sc.color_noise),
            "decoder.layers": repr(dc.layers),
            "decoder.num_queries": repr(dc.num_queries),
            "decoder.model_dim": repr(dc.model_dim),
            "decoder.head_dim": repr(dc.head_dim),
            "decoder.heads": repr(dc.heads),
            "decoder.mask_threshold": repr(dc.mask_threshold),
            "decoder.feature_dim": repr(dc.feature_dim),
            "decoder.encoder_hidden": repr(dc.encoder_hidden),
            "decoder.ffn_hidden": repr(dc.ffn_hidden),
            "train.epochs": repr(tr.epochs),
            "train.batch_size": repr(tr.batch_size),
            "train.lr": repr(tr.lr),
            "train.weight_decay": repr(tr.weight_decay),
            "train.mode": tr.mode,
            "train.deep_supervision": repr(tr.deep_supervision),
            "train.no_object_weight": repr(tr.no_object_weight),
            "train.eval_interval": repr(tr.eval_interval),
            "train.stop_map50": repr(tr.stop_map50),
            "train.lr_decay_epoch": repr(tr.lr_decay_epoch),
            "train.lr_decay_factor": repr(tr.lr_decay_factor),
            "train.augment": repr(tr.augment),
            "loss.lambda_cls": repr(lw.lambda_cls),
            "loss.lambda_bce": repr(lw.lambda_bce),
            "loss.lambda_dice": repr(lw.lambda_dice),
            "loss.lambda_iou": repr(lw.lambda_iou),
            "competition.quant_size": repr(cc.quant_size),
            "competition.table_len": repr(cc.table_len),
            "competition.qcl": repr(tg.qcl),
            "competition.rre": repr(tg.rre),
            "competition.rca": repr(tg.rca),
            "run.seed": repr(self.seed),
            "run.train_scenes": repr(self.train_scenes),
            "run.val_scenes": repr(self.val_scenes),
            "run.data_dir": self.data_dir,
            "run.out_dir": self.out_dir,
            "run.analysis_thresholds": ",".join(repr(t) for t in self.analysis_thresholds),
        }

    def config_hash(self) -> str:
        payload = "\n".join(f"{k}={v}" for k, v in sorted(self.items().items()))
        return hashlib.sha256(payload.encode()).hexdigest()

    # stopping criteria do not change what is being trained, so resuming a
    # run with more epochs (or different eval cadence) stays compatible
    _IDENTITY_EXEMPT = ("train.epochs", "train.eval_interval", "train.stop_map50")

    def identity_hash(self) -> str:
        payload = "\n".join(
            f"{k}={v}" for k, v in sorted(self.items().items())
            if k not in self._IDENTITY_EXEMPT
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    # ------------------------------------------------------------------

    def _setters(self) -> dict:
        def set_range(obj, attr, pos):
            def setter(raw):
                current = list(getattr(obj, attr))
                current[pos] = int(raw)
                setattr(obj, attr, tuple(current))
            return setter

        def set_attr(obj, attr, cast):
            def setter(raw):
                setattr(obj, attr, cast(raw))
            return setter

        sc, dc, tr, lw, cc, tg = (self.scene, self.decoder, self.train,
                                  self.loss, self.competition, self.toggles)
        return {
            "scene.instance_count_min": set_range(sc, "instance_count_range", 0),
            "scene.instance_count_max": set_range(sc, "instance_count_range", 1),
            "scene.points_per_instance_min": set_range(sc, "points_per_instance_range", 0),
            "scene.points_per_instance_max": set_range(sc, "points_per_instance_range", 1),
            "scene.extent": set_attr(sc, "extent", float),
            "scene.cluster_std": set_attr(sc, "cluster_std", float),
            "scene.voxel_size": set_attr(sc, "voxel_size", float),
            "scene.class_count": set_attr(sc, "class_count", int),
            "scene.color_noise": set_attr(sc, "color_noise", float),
            "decoder.layers": set_attr(dc, "layers", int),
            "decoder.num_queries": set_attr(dc, "num_queries", int),
            "decoder.model_dim": set_attr(dc, "model_dim", int),
            "decoder.head_dim": set_attr(dc, "head_dim", int),
            "decoder.heads": set_attr(dc, "heads", int),
            "decoder.mask_threshold": set_attr(dc, "mask_threshold", float),
            "decoder.feature_dim": set_attr(dc, "feature_dim", int),
            "decoder.encoder_hidden": set_attr(dc, "encoder_hidden", int),
            "decoder.ffn_hidden": set_attr(dc, "ffn_hidden", int),
            "train.epochs": set_attr(tr, "epochs", int),
            "train.batch_size": set_attr(tr, "batch_size", int),
            "train.lr": set_attr(tr, "lr", float),
            "train.weight_decay": set_attr(tr, "weight_decay", float),
            "train.mode": set_attr(tr, "mode", str),
            "train.deep_supervision": set_attr(tr, "deep_supervision", _cast_bool),
            "train.no_object_weight": set_attr(tr, "no_object_weight", float),
            "train.eval_interval": set_attr(tr, "eval_interval", int),
            "train.stop_map50": set_attr(tr, "stop_map50", float),
            "train.lr_decay_epoch": set_attr(tr, "lr_decay_epoch", int),
            "train.lr_decay_factor": set_attr(tr, "lr_decay_factor", float),
            "train.augment": set_attr(tr, "augment", _cast_bool),
            "loss.lambda_cls": set_attr(lw, "lambda_cls", float),
            "loss.lambda_bce": set_attr(lw, "lambda_bce", float),
            "loss.lambda_dice": set_attr(lw, "lambda_dice", float),
            "loss.lambda_iou": set_attr(lw, "lambda_iou", float),
            "competition.quant_size": set_attr(cc, "quant_size", float),
            "competition.table_len": set_attr(cc, "table_len", int),
            "competition.qcl": set_attr(tg, "qcl", _cast_bool),
            "competition.rre": set_attr(tg, "rre", _cast_bool),
            "competition.rca": set_attr(tg, "rca", _cast_bool),
            "run.seed": set_attr(self, "seed", int),
            "run.train_scenes": set_attr(self, "train_scenes", int),
            "run.val_scenes": set_attr(self, "val_scenes", int),
            "run.data_dir": set_attr(self, "data_dir", str),
            "run.out_dir": set_attr(self, "out_dir", str),
            "run.analysis_thresholds": set_attr(self, "analysis_thresholds", _cast_float_list),
        }

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        cfg = cls()
        setters = cfg._setters()
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in setters:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                setters[key](raw.strip())
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        cfg.decoder.num_classes = cfg.scene.class_count
        cfg.train.seed = cfg.seed
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        out = replace(self)
        out.seed = seed
        out.train = replace(self.train, seed=seed)
        return out

    def with_toggles(self, toggles: CompetitionToggles) -> "RunConfig":
        out = replace(self)
        out.toggles = toggles
        return out

    def effective_toggles(self) -> CompetitionToggles:
        from .training import toggles_for_mode
        return toggles_for_mode(self.train.mode, self.toggles)

    def dump(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.items().items()) + "\n"
