"""
Hook-based epoch runner.

A run walks the workflow [(mode, epochs), ...] until max_epochs train epochs
are done. Hooks fire in priority order (ties keep registration order) and
always see counters already updated for the event.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch.utils.data import DataLoader, Dataset

from checkpoint_io import save_checkpoint
from config_core import DATASETS, HOOKS, Config, build_from_config
from fashion_errors import ConfigError, NonFiniteLossError, ValidationError
from fashion_metrics import MetricReport

logger = logging.getLogger(__name__)

EVENTS = ("before_run", "before_epoch", "before_iter", "after_iter", "after_epoch", "after_run")
MODES = ("train", "val")
PATH_KEYS = ("ann_file", "landmark_file", "image_root", "root")

DEFAULT_SCHEDULE = {
    "max_epochs": 4,
    "batch_size": 4,
    "workflow": [["train", 1]],
}

DEFAULT_OPTIMIZER = {
    "type": "SGD",
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 0.0,
}


@dataclass
class RunnerState:
    epoch: int = 0
    iter: int = 0
    inner_iter: int = 0
    mode: str = "train"
    lr: float = 0.01
    max_epochs: int = 1


class Hook:
    """Base hook; subclasses override the events they care about"""

    name = "hook"
    priority = 50

    def before_run(self, runner: "Runner") -> None:
        pass

    def before_epoch(self, runner: "Runner") -> None:
        pass

    def before_iter(self, runner: "Runner") -> None:
        pass

    def after_iter(self, runner: "Runner") -> None:
        pass

    def after_epoch(self, runner: "Runner") -> None:
        pass

    def after_run(self, runner: "Runner") -> None:
        pass


def _collate(samples: List[Dict[str, Any]]) -> Dict[str, Any]:
    batch = {}
    for key in samples[0]:
        values = [s[key] for s in samples]
        if isinstance(values[0], torch.Tensor):
            batch[key] = torch.stack(values)
        elif isinstance(values[0], str):
            batch[key] = values
        else:
            batch[key] = torch.tensor(values)
    return batch


class Runner:
    def __init__(self, model: torch.nn.Module, optimizer: torch.optim.Optimizer,
                 train_data: Optional[Dataset] = None, val_data: Optional[Dataset] = None,
                 max_epochs: int = 1, batch_size: int = 1, seed: int = 0,
                 work_dir: Optional[Union[str, Path]] = None, fingerprint: str = "",
                 trace: bool = False, eval_cfg: Optional[Config] = None):
        if max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {max_epochs}", path="schedule.max_epochs")
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}", path="schedule.batch_size")
        self.model = model
        self.optimizer = optimizer
        self.data = {"train": train_data, "val": val_data}
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.work_dir = Path(work_dir) if work_dir is not None else None
        self.fingerprint = fingerprint
        self.eval_cfg = eval_cfg
        self.state = RunnerState(lr=self.optimizer.param_groups[0]["lr"], max_epochs=int(max_epochs))
        self.resumed_from: Optional[Path] = None
        self.hooks: List[Hook] = []
        self.trace: Optional[List[str]] = [] if trace else None
        self.last_loss: Optional[float] = None
        self.epoch_losses: List[float] = []
        self.eval_reports: List[Tuple[int, MetricReport]] = []
        self.hook_errors: List[Tuple[str, int, Exception]] = []

    def register_hook(self, hook: Hook) -> None:
        if any(h.name == hook.name for h in self.hooks):
            raise ConfigError(f"hook '{hook.name}' is already registered")
        self.hooks.append(hook)
        # sorted() is stable, so equal priorities keep registration order
        self.hooks = sorted(self.hooks, key=lambda h: h.priority)

    def call_hook(self, event: str) -> None:
        if self.trace is not None:
            self.trace.append(event)
        for hook in self.hooks:
            getattr(hook, event)(self)

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.state.lr = lr

    def _loader(self, mode: str) -> DataLoader:
        dataset = self.data[mode]
        if dataset is None:
            raise ConfigError(f"workflow has a {mode} phase but no {mode} dataset is configured",
                              path=f"data.{mode}")
        if len(dataset) == 0:
            raise ValidationError(f"{mode} dataset is empty")
        if hasattr(dataset, "set_epoch"):
            dataset.set_epoch(self.state.epoch)
        generator = torch.Generator().manual_seed(self.seed + self.state.epoch)
        order = torch.randperm(len(dataset), generator=generator).tolist()
        return DataLoader(dataset, batch_size=self.batch_size, sampler=order, collate_fn=_collate)

    def train_epoch(self) -> None:
        loader = self._loader("train")
        self.state.mode = "train"
        self.state.inner_iter = 0
        self.epoch_losses = []
        self.model.train()
        self.call_hook("before_epoch")
        for batch in loader:
            self.call_hook("before_iter")
            loss = self.model.train_step(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(value, self.state.iter + 1)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.last_loss = value
            self.epoch_losses.append(value)
            self.state.iter += 1
            self.state.inner_iter += 1
            self.call_hook("after_iter")
        self.state.epoch += 1
        self.call_hook("after_epoch")

    def val_epoch(self) -> None:
        loader = self._loader("val")
        self.state.mode = "val"
        self.state.inner_iter = 0
        self.epoch_losses = []
        self.model.eval()
        self.call_hook("before_epoch")
        with torch.no_grad():
            for batch in loader:
                self.call_hook("before_iter")
                value = float(self.model.train_step(batch))
                self.last_loss = value
                self.epoch_losses.append(value)
                self.state.inner_iter += 1
                self.call_hook("after_iter")
        self.model.train()
        self.call_hook("after_epoch")

    def run(self, workflow: Sequence[Tuple[str, int]]) -> RunnerState:
        """Execute the workflow; returns the final state"""
        workflow = [(str(mode), int(epochs)) for mode, epochs in workflow]
        if not workflow:
            raise ConfigError("workflow is empty", path="schedule.workflow")
        for mode, epochs in workflow:
            if mode not in MODES:
                raise ConfigError(f"unknown workflow mode '{mode}', expected train or val",
                                  path="schedule.workflow")
            if epochs < 1:
                raise ConfigError(f"workflow phase '{mode}' needs at least 1 epoch", path="schedule.workflow")
        has_train = any(mode == "train" for mode, _ in workflow)
        logger.info("run %s for %d epoch(s), %d hook(s)", workflow, self.state.max_epochs, len(self.hooks))
        self.call_hook("before_run")
        while True:
            for mode, epochs in workflow:
                for _ in range(epochs):
                    if mode == "train":
                        if self.state.epoch >= self.state.max_epochs:
                            break
                        self.train_epoch()
                    else:
                        self.val_epoch()
            if not has_train or self.state.epoch >= self.state.max_epochs:
                break
        self.call_hook("after_run")
        for name, epoch, error in self.hook_errors:
            logger.warning("hook %s failed after epoch %d: %s", name, epoch, error)
        return self.state

    def is_due(self, every_n_epochs: int) -> bool:
        return self.state.mode == "train" and self.state.epoch % every_n_epochs == 0


@HOOKS.register("LrStepHook")
class LrStepHook(Hook):
    name = "lr"
    priority = 10

    def __init__(self, base_lr: float, milestones: Sequence[int] = (), gamma: float = 0.1,
                 priority: Optional[int] = None):
        milestones = [int(m) for m in milestones]
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {milestones}")
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.base_lr = float(base_lr)
        self.milestones = milestones
        self.gamma = float(gamma)
        if priority is not None:
            self.priority = priority

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** sum(1 for m in self.milestones if m <= epoch)

    def before_epoch(self, runner):
        if runner.state.mode == "train":
            runner.set_lr(self.lr_at(runner.state.epoch))


@HOOKS.register("EvalHook")
class EvalHook(Hook):
    """Evaluate the model on the val dataset every n train epochs"""

    name = "eval"
    priority = 40

    def __init__(self, metric_fn: Optional[Callable[[Any, Any], MetricReport]] = None, every_n_epochs: int = 1,
                 fatal: bool = False, priority: Optional[int] = None):
        if every_n_epochs < 1:
            raise ValueError(f"every_n_epochs must be >= 1, got {every_n_epochs}")
        self.metric_fn = metric_fn
        self.every_n_epochs = int(every_n_epochs)
        self.fatal = fatal
        if priority is not None:
            self.priority = priority

    def after_epoch(self, runner):
        if not runner.is_due(self.every_n_epochs):
            return
        dataset = runner.data["val"]
        try:
            if dataset is None:
                raise ConfigError("eval hook needs a val dataset", path="data.val")
            if self.metric_fn is not None:
                report = self.metric_fn(runner.model, dataset)
            else:
                report = runner.model.evaluate(dataset, runner.eval_cfg)
        except Exception as e:
            if self.fatal:
                raise
            logger.warning("evaluation after epoch %d failed: %s", runner.state.epoch, e)
            runner.hook_errors.append((self.name, runner.state.epoch, e))
            return
        runner.eval_reports.append((runner.state.epoch, report))
        logger.info("epoch %d: %s", runner.state.epoch, ", ".join(report.headline()))


@HOOKS.register("CheckpointHook")
class CheckpointHook(Hook):
    name = "checkpoint"
    priority = 50

    def __init__(self, out_dir: Union[str, Path], every_n_epochs: int = 1, priority: Optional[int] = None):
        if every_n_epochs < 1:
            raise ValueError(f"every_n_epochs must be >= 1, got {every_n_epochs}")
        self.out_dir = Path(out_dir)
        self.every_n_epochs = int(every_n_epochs)
        self.saved: List[Path] = []
        if priority is not None:
            self.priority = priority

    def after_epoch(self, runner):
        if runner.is_due(self.every_n_epochs):
            self.saved.append(save_checkpoint(runner, self.out_dir / f"epoch_{runner.state.epoch}.ckpt"))


@HOOKS.register("RunLogHook")
class RunLogHook(Hook):
    """JSON-lines log of train iterations, val epochs and eval reports"""

    name = "runlog"
    priority = 90

    def __init__(self, out_dir: Union[str, Path], filename: str = "run_log.jsonl", priority: Optional[int] = None):
        self.path = Path(out_dir) / filename
        self._reported = 0
        if priority is not None:
            self.priority = priority

    def _write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def before_run(self, runner):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        # a fresh run starts a fresh log; a resumed run continues it
        if runner.resumed_from is None and runner.state.iter == 0:
            self.path.write_text("", encoding="utf-8")
        self._reported = len(runner.eval_reports)

    def after_iter(self, runner):
        if runner.state.mode == "train":
            self._write({"mode": "train", "epoch": runner.state.epoch, "iter": runner.state.iter,
                         "lr": runner.state.lr, "loss": round(runner.last_loss, 6)})

    def after_epoch(self, runner):
        if runner.state.mode == "val" and runner.epoch_losses:
            mean = sum(runner.epoch_losses) / len(runner.epoch_losses)
            self._write({"mode": "val", "epoch": runner.state.epoch, "iter": runner.state.iter,
                         "lr": runner.state.lr, "loss": round(mean, 6)})
        for epoch, report in runner.eval_reports[self._reported:]:
            self._write({"mode": "eval", "epoch": epoch, "iter": runner.state.iter,
                         "metrics": report.to_dict()["scalars"]})
        self._reported = len(runner.eval_reports)


def build_optimizer(model: torch.nn.Module, cfg: Optional[Union[Config, Dict[str, Any]]] = None) -> torch.optim.Optimizer:
    settings = dict(DEFAULT_OPTIMIZER)
    if cfg is not None:
        settings.update(cfg.to_dict() if isinstance(cfg, Config) else dict(cfg))
    kind = settings.pop("type")
    if kind != "SGD":
        raise ConfigError(f"unsupported optimizer '{kind}', only SGD is available", path="optimizer.type")
    try:
        return torch.optim.SGD(model.parameters(), lr=float(settings.pop("lr")), **settings)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid optimizer settings: {e}", path="optimizer") from None


def schedule_settings(cfg: Config) -> Dict[str, Any]:
    settings = dict(DEFAULT_SCHEDULE)
    if "schedule" in cfg:
        settings.update(cfg.get("schedule").to_dict())
    return settings


def dataset_entry(cfg: Config, split: str) -> Optional[Dict[str, Any]]:
    """data.<split> with file paths joined onto data.root (relative to the working directory)"""
    key = f"data.{split}"
    if key not in cfg:
        return None
    entry = cfg.get(key)
    if not isinstance(entry, Config):
        raise ConfigError(f"'{key}' must be a mapping", path=key)
    entry = entry.to_dict()
    root = Path(cfg.get("data.root", "."))
    for name in PATH_KEYS:
        if isinstance(entry.get(name), str):
            entry[name] = str(root / entry[name])
    return entry


def build_dataset(cfg: Config, split: str, **defaults: Any) -> Optional[Dataset]:
    entry = dataset_entry(cfg, split)
    if entry is None:
        return None
    return build_from_config(DATASETS, entry, **defaults)


def dataset_defaults(cfg: Config, model: Optional[torch.nn.Module] = None) -> Dict[str, Any]:
    defaults = {"image_size": int(cfg.get("data.image_size", 64)), "seed": int(cfg.get("seed", 0))}
    landmarks = getattr(model, "num_landmarks", None)
    if landmarks:
        defaults["num_landmarks"] = landmarks
    return defaults


def _check_dataset_fits(model, dataset, split: str) -> None:
    head = getattr(model, "head", None)
    expected = getattr(head, "num_attributes", None)
    if expected is not None and getattr(dataset, "num_attributes", expected) != expected:
        raise ConfigError(f"data.{split} has {dataset.num_attributes} attributes, "
                          f"model head expects {expected}", path="model.head.num_attributes")
    landmarks = getattr(model, "num_landmarks", None)
    if landmarks and getattr(dataset, "num_landmarks", landmarks) not in (landmarks, 0):
        raise ConfigError(f"data.{split} has {dataset.num_landmarks} landmarks, model expects {landmarks}",
                          path="model.num_landmarks")


def build_runner(cfg: Config, model: torch.nn.Module, work_dir: Union[str, Path], trace: bool = False) -> Runner:
    """Datasets, optimizer, schedule and hooks from a loaded config"""
    if cfg.get("deterministic", False):
        torch.use_deterministic_algorithms(True, warn_only=True)
    seed = int(cfg.get("seed", 0))
    schedule = schedule_settings(cfg)
    defaults = dataset_defaults(cfg, model)
    datasets = {}
    for split in ("train", "val"):
        dataset = build_dataset(cfg, split, **defaults)
        if dataset is not None:
            _check_dataset_fits(model, dataset, split)
        datasets[split] = dataset
    optimizer = build_optimizer(model, cfg.get("optimizer", None))
    runner = Runner(model, optimizer, datasets["train"], datasets["val"],
                    max_epochs=int(schedule["max_epochs"]), batch_size=int(schedule["batch_size"]), seed=seed,
                    work_dir=work_dir, fingerprint=cfg.fingerprint("model"), trace=trace,
                    eval_cfg=cfg.get("evaluation", None))
    for entry in cfg.get("hooks", []):
        hook = build_from_config(HOOKS, entry, base_lr=optimizer.param_groups[0]["lr"], out_dir=work_dir)
        runner.register_hook(hook)
    return runner
