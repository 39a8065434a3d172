"""Adam training loop with warmup, variational noise, EMA weights and checkpoints."""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .features import NormStats
from .metrics import corpus_cer, measure_throughput
from .model import AsrModel, ModelConfig, pad_batch
from .specaugment import SpecAugmentConfig, augment
from .vocab import Vocabulary

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    model: dict = field(default_factory=dict)
    steps: int = 150_000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    ema: bool = True
    ema_decay: float = 0.9999
    variational_noise: bool = True
    vn_sigma: float = 0.075
    specaugment: bool = True
    specaugment_cfg: tuple = (10, 0.05, 2, 27)
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    checkpoint_every: int = 0  # 0: only at the end
    stop_below_cer: Optional[float] = None  # early stop once dev CER (percent) drops below this

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.vn_sigma < 0:
            raise ValueError(f"vn_sigma must be >= 0, got {self.vn_sigma}")
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and warmup_steps >= 1 are required")
        self.adam_betas = tuple(self.adam_betas)
        self.specaugment_cfg = tuple(self.specaugment_cfg)
        SpecAugmentConfig.from_tuple(self.specaugment_cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["specaugment_cfg"] = list(self.specaugment_cfg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def lr_schedule(k: int, peak: float, warmup: int) -> float:
    """peak * min(k / w, sqrt(w / k)): linear warmup then inverse-sqrt decay."""
    if k < 1:
        raise ValueError(f"schedule is defined for k >= 1, got {k}")
    return peak * min(k / warmup, math.sqrt(warmup / k))


def ema_update(shadow: Dict[str, np.ndarray], params: Dict[str, np.ndarray], decay: float) -> None:
    """In place: shadow <- decay * shadow + (1 - decay) * params."""
    if not 0.0 < decay < 1.0:
        raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
    for k, theta in params.items():
        s = shadow[k]
        s *= decay
        s += (1.0 - decay) * theta


def apply_variational_noise(theta: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return theta
    return theta + rng.normal(0.0, sigma, size=np.shape(theta))


@contextlib.contextmanager
def variational_noise(model, sigma: float, rng: np.random.Generator):
    """Temporarily replace in-scope parameter values with noised copies.

    Since d(theta + n)/d(theta) = 1, gradients computed inside the context are
    already gradients with respect to the clean parameters, which are restored
    on exit.
    """
    params = dict(model.named_parameters())
    names = model.vn_parameter_names()
    saved = {}
    try:
        if sigma > 0:
            for n in names:
                p = params[n]
                saved[n] = p.data
                p.data = apply_variational_noise(p.data, sigma, rng)
        yield names
    finally:
        for n, data in saved.items():
            params[n].data = data


@contextlib.contextmanager
def swapped_parameters(model, values: Dict[str, np.ndarray]):
    """Evaluate ``model`` with ``values`` (e.g. EMA weights) in place of its parameters."""
    params = dict(model.named_parameters())
    saved = {k: params[k].data for k in values}
    try:
        for k, v in values.items():
            params[k].data = v.copy()
        yield
    finally:
        for k, v in saved.items():
            params[k].data = v


class Adam:
    def __init__(self, shapes: Dict[str, tuple], betas=(0.9, 0.98), eps=1e-9):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        """Bias-corrected Adam update, in place on ``params``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise T.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam, params, grads, lr: float) -> None:
    opt.step(params, grads, lr)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # normalized (T, 80)
    tokens: List[int]
    text: str = ""


def decode_corpus(model: AsrModel, data: Sequence[Utterance], search_cfg=None,
                  greedy: bool = True, batch_size: int = 32) -> List:
    """Best hypothesis per utterance, decoding padded chunks of ``batch_size``."""
    out = []
    for i in range(0, len(data), batch_size):
        feats, lens = pad_batch([u.features for u in data[i:i + batch_size]])
        out.extend(model.decode(feats, lens, search_cfg, greedy))
    return out


class Trainer:
    """Owns the model, optimizer, EMA shadow and every random stream of a run."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary, norm: Optional[NormStats] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.norm = norm
        mcfg = dict(cfg.model)
        mcfg["vocab_size"] = len(vocab)
        self.model_cfg = ModelConfig.from_dict(mcfg)
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.rngs = {name: np.random.default_rng(s)
                     for name, s in zip(("model", "data", "augment", "noise"), seeds)}
        self.model = AsrModel(self.model_cfg, self.rngs["model"])
        self.params = dict(self.model.named_parameters())
        self.opt = Adam({k: p.shape for k, p in self.params.items()}, cfg.adam_betas, cfg.adam_eps)
        self.shadow = {k: p.data.copy() for k, p in self.params.items()} if cfg.ema else None
        self.sa_cfg = SpecAugmentConfig.from_tuple(cfg.specaugment_cfg)
        self.step = 0
        self.skipped = 0
        self._order: List[int] = []

    # -- data -------------------------------------------------------------

    def _next_batch(self, data: Sequence[Utterance]) -> List[Utterance]:
        batch = []
        while len(batch) < min(self.cfg.batch_size, len(data)):
            if not self._order:
                self._order = self.rngs["data"].permutation(len(data)).tolist()
            batch.append(data[self._order.pop()])
        return batch

    # -- one update ---------------------------------------------------------

    def train_step(self, batch: Sequence[Utterance]) -> dict:
        cfg = self.cfg
        feats = [u.features for u in batch]
        if cfg.specaugment:
            feats = [augment(f, self.sa_cfg, self.rngs["augment"]) for f in feats]
        x, lens = pad_batch(feats)
        sigma = cfg.vn_sigma if cfg.variational_noise else 0.0
        self.model.train()
        with variational_noise(self.model, sigma, self.rngs["noise"]):
            loss = self.model.loss(x, lens, [u.tokens for u in batch])
            grads = T.backward(loss)
        grads = {k: grads.get(p, np.zeros(p.shape)).copy() for k, p in self.params.items()}
        self.model.zero_grad()
        self.step += 1
        finite = np.isfinite(loss.data) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            self.skipped += 1
            return {"loss": float(loss.data), "skipped": True}
        norm = clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_schedule(self.step, cfg.peak_lr, cfg.warmup_steps)
        self.opt.step({k: p.data for k, p in self.params.items()}, grads, lr)
        if self.shadow is not None:
            ema_update(self.shadow, {k: p.data for k, p in self.params.items()}, cfg.ema_decay)
        return {"loss": float(loss.data), "lr": lr, "grad_norm": norm, "skipped": False}

    # -- evaluation -----------------------------------------------------------

    def eval_context(self):
        return swapped_parameters(self.model, self.shadow) if self.shadow is not None \
            else contextlib.nullcontext()

    def evaluate(self, data: Sequence[Utterance], search_cfg=None, greedy: bool = True):
        with self.eval_context():
            hyps = decode_corpus(self.model, data, search_cfg, greedy)
        return corpus_cer([u.tokens for u in data], [h.tokens for h in hyps]), hyps

    # -- loop -------------------------------------------------------------------

    def fit(self, train: Sequence[Utterance], dev: Sequence[Utterance] = (),
            log_path: Union[str, Path, None] = None, checkpoint_dir: Union[str, Path, None] = None,
            on_record: Optional[Callable[[dict], None]] = None) -> List[dict]:
        """Run until ``cfg.steps`` (or the early-stop CER); returns the metrics records."""
        if not train:
            raise ValueError("training data is empty")
        cfg = self.cfg
        records: List[dict] = []
        log = open(log_path, "w", encoding="utf-8") if log_path else None
        timings: List[Tuple[int, float]] = []
        train_wall = 0.0

        def emit(rec):
            records.append(rec)
            if log:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            if on_record:
                on_record(rec)

        try:
            window = []
            while self.step < cfg.steps:
                t0 = time.perf_counter()
                batch = self._next_batch(train)
                info = self.train_step(batch)
                dt = time.perf_counter() - t0
                train_wall += dt
                timings.append((len(batch), dt))
                window.append(info["loss"])
                if self.step % cfg.log_every == 0 or self.step == cfg.steps:
                    recent = timings[-cfg.log_every:]
                    emit({"kind": "train", "step": self.step, "wall": train_wall,
                          "loss": float(np.mean(window)), "skipped": self.skipped,
                          "utt_per_sec": sum(n for n, _ in recent) / max(sum(d for _, d in recent), 1e-12)})
                    window = []
                stop = False
                if dev and (self.step % cfg.eval_every == 0 or self.step == cfg.steps):
                    cer, _ = self.evaluate(dev)
                    emit({"kind": "dev", "step": self.step, "wall": train_wall, "cer": cer})
                    stop = cfg.stop_below_cer is not None and cer < cfg.stop_below_cer
                if checkpoint_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step{self.step}.npz")
                if stop:
                    break
            if checkpoint_dir:
                self.save(Path(checkpoint_dir) / "final.npz")
            if len(timings) > 50 + 1:
                emit({"kind": "throughput", "step": self.step,
                      "utt_per_sec": measure_throughput(timings)})
        finally:
            if log:
                log.close()
        return records

    # -- checkpoints -------------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        arrays = {}
        for k, p in self.params.items():
            arrays[f"param/{k}"] = p.data
            arrays[f"adam_m/{k}"] = self.opt.m[k]
            arrays[f"adam_v/{k}"] = self.opt.v[k]
            if self.shadow is not None:
                arrays[f"ema/{k}"] = self.shadow[k]
        for k, b in self.model.named_buffers():
            arrays[f"buffer/{k}"] = b
        manifest = {
            "format_version": CHECKPOINT_FORMAT,
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "step": self.step,
            "adam_t": self.opt.t,
            "skipped": self.skipped,
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
            "rng": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "data_order": list(self._order),  # rest of the current epoch
            "vocab": self.vocab.chars,
            "norm": None if self.norm is None else {"mean": self.norm.mean.tolist(),
                                                    "std": self.norm.std.tolist()},
        }
        arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Trainer":
        ckpt = load_checkpoint(path)
        man = ckpt.manifest
        norm = NormStats(**man["norm"]) if man["norm"] else None
        tr = cls(TrainConfig.from_dict(man["train_config"]), Vocabulary(man["vocab"]), norm)
        tr.model.load_state_dict(ckpt.arrays)
        for k in tr.params:
            tr.opt.m[k] = ckpt.arrays[f"adam_m/{k}"].copy()
            tr.opt.v[k] = ckpt.arrays[f"adam_v/{k}"].copy()
            if tr.shadow is not None:
                tr.shadow[k] = ckpt.arrays[f"ema/{k}"].copy()
        tr.opt.t = man["adam_t"]
        tr.step = man["step"]
        tr.skipped = man["skipped"]
        for k, state in man["rng"].items():
            tr.rngs[k].bit_generator.state = state
        tr._order = list(man.get("data_order", []))
        return tr


@dataclass
class Checkpoint:
    manifest: dict
    arrays: Dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["model_config"])

    def eval_weights(self) -> Dict[str, np.ndarray]:
        """EMA weights when the run kept them, raw parameters otherwise."""
        params = {k[len("param/"):]: v for k, v in self.arrays.items() if k.startswith("param/")}
        if any(k.startswith("ema/") for k in self.arrays):
            return {k: self.arrays[f"ema/{k}"] for k in params}
        return params

    def build_model(self) -> AsrModel:
        """Model in eval mode carrying the evaluation weights."""
        model = AsrModel(self.model_config, np.random.default_rng(0))
        state = {k: v for k, v in self.arrays.items() if k.startswith("buffer/")}
        state.update({f"param/{k}": v for k, v in self.eval_weights().items()})
        model.load_state_dict(state)
        return model.eval()


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    if "manifest" not in arrays:
        raise ValueError(f"{path}: not a checkpoint (no manifest)")
    manifest = json.loads(arrays.pop("manifest").tobytes().decode("utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    for k, shape in manifest["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"{path}: array {k} has shape {arrays[k].shape}, manifest says {shape}")
    return Checkpoint(manifest, arrays)
