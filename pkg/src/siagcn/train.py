"""Optimization, checkpoints and the finite-difference gradient check."""

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, MissingFileError, NumericalError
from .model import dump_model, model_backward, model_forward, decode_argmax, parse_model
from .objective import PCK_DELTAS, LossConfig, mpck, stage_loss, total_loss
from .reference import reference_loss
from .synth import sample_rng

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive_moment", "sgd_momentum")
_ALIASES = {"adam": "adaptive_moment", "sgd": "sgd_momentum"}


@dataclass
class OptimizerState:
    """Hyperparameters, moment buffers and step counter of one optimizer."""

    kind: str = "adaptive_moment"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")

    def hyperparameters(self):
        return {k: getattr(self, k) for k in ("kind", "lr", "beta1", "beta2", "eps", "momentum", "t")}

    def buffers(self):
        return list(self.m) + list(self.v)


def step(params, grads, state, lr=None):
    """Apply one in-place update to ``params``; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ContractError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        if state.kind == "adaptive_moment":
            state.v = [np.zeros_like(p) for p in params]
    elif any(b.shape != p.shape for b, p in zip(state.m, params)) or len(state.m) != len(params):
        raise ContractError("optimizer buffers do not match the parameters")
    lr = state.lr if lr is None else lr
    state.t += 1
    if state.kind == "adaptive_moment":
        c1 = 1.0 - state.beta1**state.t
        c2 = 1.0 - state.beta2**state.t
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    else:
        for p, g, buf in zip(params, grads, state.m):
            buf *= state.momentum
            buf += g
            p -= lr * buf
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    milestones: tuple = (18, 24)
    lr_factor: float = 0.5
    optimizer: str = "adaptive_moment"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_every: int = 1
    max_steps: int = -1
    deltas: tuple = PCK_DELTAS

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "optimizer", _ALIASES.get(self.optimizer, self.optimizer))
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")

    def lr_at(self, epoch):
        return self.lr * self.lr_factor ** sum(1 for m in self.milestones if m <= epoch)

    def new_state(self):
        return OptimizerState(self.optimizer, self.lr, self.beta1, self.beta2, self.eps, self.momentum)

    def to_dict(self):
        d = asdict(self)
        d["loss"] = {"alpha_schedule": [list(s) for s in self.loss.alpha_schedule], "stages": self.loss.stages}
        d["milestones"] = list(self.milestones)
        d["deltas"] = list(self.deltas)
        return d


def predict_maps(model, inputs, batch_size=64):
    out = np.empty_like(inputs, dtype=np.float64)
    for i in range(0, len(inputs), batch_size):
        out[i:i + batch_size] = model_forward(inputs[i:i + batch_size], model)[2]
    return out


def evaluate(model, data, deltas=PCK_DELTAS, s=None, batch_size=64):
    """``(mpck, table)`` of the model's argmax predictions on ``data``."""
    s = s or data.map_shape[1]
    pred = decode_argmax(predict_maps(model, data.inputs, batch_size))
    return mpck(pred, data.keypoints, deltas, s)


def evaluate_inputs(data, deltas=PCK_DELTAS, s=None):
    """PCK of decoding the input maps directly (the unrefined baseline)."""
    s = s or data.map_shape[1]
    return mpck(decode_argmax(data.inputs), data.keypoints, deltas, s)


def save_checkpoint(path, model, state, info):
    appendix = {"optimizer": state.hyperparameters(), "train": info}
    buf = io.BytesIO()
    dump_model(buf, model, appendix, state.buffers())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, optimizer_state, train_info)``; state is None for bare model files."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    with path.open("rb") as f:
        model, appendix, tensors = parse_model(f)
    if appendix is None:
        return model, None, None
    hp = dict(appendix["optimizer"])
    state = OptimizerState(**hp)
    n = len(tensors) // (2 if state.kind == "adaptive_moment" else 1)
    state.m, state.v = tensors[:n], tensors[n:]
    return model, state, appendix.get("train", {})


def _param_norms(model):
    return {name: float(np.linalg.norm(a)) for name, a in model.parameters()}


def _write_record(log_file, record):
    if log_file is not None:
        log_file.write(json.dumps(record, sort_keys=True) + "\n")
        log_file.flush()


@dataclass
class TrainResult:
    model: object
    best_model: object
    state: OptimizerState
    history: list
    best_mpck: float
    best_epoch: int


def train_loop(model, train_data, cfg, val_data=None, state=None, start_epoch=0,
               log_path=None, checkpoint_dir=None, best=(-1.0, -1)):
    """Train ``model`` in place.

    Batches are mean-reduced per sample. The visiting order of each epoch is
    a permutation drawn from ``(cfg.seed, epoch)``, so resuming at
    ``start_epoch`` with the saved optimizer state reproduces an
    uninterrupted run exactly. When ``val_data`` is given it is scored after
    every ``cfg.eval_every`` epochs and the best-mPCK model is kept (and
    written to ``checkpoint_dir/best.ckpt``). A non-finite loss aborts with
    :class:`NumericalError` after the log has been flushed.
    """
    if len(train_data) == 0:
        raise ContractError("training set is empty")
    if train_data.n_nodes != model.graph.node_count:
        raise ConfigError(f"data has {train_data.n_nodes} channels, model graph has {model.graph.node_count} nodes")
    state = state or cfg.new_state()
    s = train_data.map_shape[1]
    params = [a for _, a in model.parameters()]
    best_mpck, best_epoch = best
    best_model = model.copy()
    history = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_file = open(log_path, "a", encoding="utf-8") if log_path is not None else None

    def info(epoch):
        return {"epoch": epoch, "best_mpck": best_mpck, "best_epoch": best_epoch, "config": cfg.to_dict()}

    try:
        if val_data is not None and start_epoch == 0:
            score, table = evaluate(model, val_data, cfg.deltas, s)
            rec = {"epoch": -1, "kind": "eval", "mpck": score, "pck": [table[d] for d in cfg.deltas]}
            history.append(rec)
            _write_record(log_file, rec)
            best_mpck, best_epoch = score, -1
            best_model = model.copy()
            if ckpt is not None:
                save_checkpoint(ckpt / "best.ckpt", model, state, info(-1))

        steps = 0
        n = len(train_data)
        for epoch in range(start_epoch, cfg.epochs):
            if 0 <= cfg.max_steps <= steps:
                break
            lr = cfg.lr_at(epoch)
            alpha = cfg.loss.alpha(epoch)
            order = sample_rng(cfg.seed, 1000, epoch).permutation(n)
            sums = np.zeros(3)
            seen = 0
            for b, i in enumerate(range(0, n, cfg.batch_size)):
                if 0 <= cfg.max_steps <= steps:
                    break
                idx = np.sort(order[i:i + cfg.batch_size])
                X = train_data.inputs[idx]
                Y_star = train_data.targets(idx)
                with np.errstate(over="ignore", invalid="ignore"):
                    # divergence is caught below through the loss value
                    _, _, Y_bar, cache = model_forward(X, model)
                    loss, dY = total_loss(X[:, None], Y_bar, Y_star, cfg.loss, epoch)
                if not np.isfinite(loss):
                    rec = {"epoch": epoch, "kind": "abort", "batch": b, "loss": repr(loss),
                           "param_norms": _param_norms(model)}
                    history.append(rec)
                    _write_record(log_file, rec)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}; parameter norms: {_param_norms(model)}")
                grads = model_backward(cache, dY / len(idx), model)
                step(params, grads, state, lr=lr)
                model.bump()
                steps += 1
                l1 = stage_loss(X[:, None], Y_star)
                sums += (loss, l1, loss - alpha * l1)
                seen += len(idx)
            rec = {"epoch": epoch, "kind": "train", "lr": lr, "alpha": alpha, "steps": state.t,
                   "loss": sums[0] / max(seen, 1), "l1": sums[1] / max(seen, 1), "l2": sums[2] / max(seen, 1)}
            if val_data is not None and (epoch + 1) % cfg.eval_every == 0:
                score, table = evaluate(model, val_data, cfg.deltas, s)
                rec.update(mpck=score, pck=[table[d] for d in cfg.deltas])
                if score > best_mpck:
                    best_mpck, best_epoch = score, epoch
                    best_model = model.copy()
                    if ckpt is not None:
                        save_checkpoint(ckpt / "best.ckpt", model, state, info(epoch))
            logger.info("epoch %d lr %.3g alpha %.3g loss %.4f%s", epoch, lr, alpha, rec["loss"],
                        f" val mPCK {100 * rec['mpck']:.2f}" if "mpck" in rec else "")
            history.append(rec)
            _write_record(log_file, rec)
            if ckpt is not None:
                save_checkpoint(ckpt / "last.ckpt", model, state, info(epoch))
                if val_data is None:
                    save_checkpoint(ckpt / "best.ckpt", model, state, info(epoch))
    finally:
        if log_file is not None:
            log_file.close()
    if val_data is None:
        best_model = model.copy()
    return TrainResult(model, best_model, state, history, best_mpck, best_epoch)


@dataclass
class GradcheckReport:
    """Per-tensor worst relative error of analytic vs. finite-difference gradients.

    ``groups`` maps a parameter name to ``(max_rel_err, index, analytic, numeric)``
    at the worst entry. Relative error is ``|a - n| / max(|a|, |n|, floor)``,
    where ``floor`` is the resolution limit of the central difference.
    """

    groups: dict
    epsilon: float
    floor: float
    n_checked: int

    def worst(self):
        name = max(self.groups, key=lambda k: self.groups[k][0])
        return (name,) + tuple(self.groups[name])

    @property
    def max_error(self):
        return max(g[0] for g in self.groups.values()) if self.groups else 0.0

    def passed(self, tol=1e-6):
        return self.max_error < tol

    def format(self, tol=1e-6):
        lines = [f"{name:28s} max rel err {err:.3e} at {idx}" for name, (err, idx, _, _) in self.groups.items()]
        name, err, idx, a, n = self.worst()
        lines.append(f"worst: {name}{list(idx)} analytic={a:.10g} numeric={n:.10g} rel={err:.3e}")
        lines.append(f"{'PASS' if self.passed(tol) else 'FAIL'} (tolerance {tol:g}, {self.n_checked} entries, eps {self.epsilon:g})")
        return "\n".join(lines)


def select_params(model, params="all"):
    names = [n for n, _ in model.parameters()]
    if params in ("all", None):
        return names
    if params == "kernels":
        return [n for n in names if n.endswith(".kernels")]
    chosen = [n for n in names if n.startswith(params)]
    if not chosen:
        raise ConfigError(f"no parameter group matches {params!r}")
    return chosen


def gradcheck(model, sample, epsilon=1e-6, loss_cfg=None, epoch=0, params="all", max_checks=None,
              seed=0, analytic=None, fd_dtype=np.longdouble, floor=None):
    """Compare analytic gradients with central differences of the full loss.

    ``sample`` provides ``input_maps`` (also used as the single preliminary
    stage) and ``gt_maps``. Finite differences are taken on the independent
    reference forward in ``fd_dtype``. ``analytic`` can replace the computed
    analytic gradients, which is how planted faults are tested. Above
    ``max_checks`` entries a seeded random subset is checked.
    """
    if not 1e-8 <= epsilon <= 1e-4:
        raise ConfigError("epsilon must lie in [1e-8, 1e-4]")
    loss_cfg = loss_cfg or LossConfig()
    X0 = np.asarray(sample.input_maps, dtype=np.float64)
    Y_star = np.asarray(sample.gt_maps, dtype=np.float64)
    S = X0[None]

    if analytic is None:
        _, _, Y_bar, cache = model_forward(X0, model)
        _, dY = total_loss(S, Y_bar, Y_star, loss_cfg, epoch)
        analytic = model_backward(cache, dY, model)

    named = model.parameters()
    chosen = set(select_params(model, params))
    base = [a.astype(fd_dtype) for _, a in named]
    alpha = loss_cfg.alpha(epoch)

    def f(ps):
        return reference_loss(X0, Y_star, S, alpha, model.graph, model.config, ps)

    entries = [(g, j) for g, (name, a) in enumerate(named) if name in chosen for j in range(a.size)]
    if max_checks is not None and len(entries) > max_checks:
        rng = np.random.Generator(np.random.PCG64(seed))
        pick = np.sort(rng.choice(len(entries), size=max_checks, replace=False))
        entries = [entries[i] for i in pick]
    if floor is None:
        floor = 10 * np.finfo(fd_dtype).eps * max(1.0, abs(float(f(base)))) / epsilon

    groups = {}
    eps = fd_dtype(epsilon) if isinstance(fd_dtype, type) else np.dtype(fd_dtype).type(epsilon)
    for g, j in entries:
        ps = list(base)
        p = base[g].copy().reshape(-1)
        orig = p[j]
        p[j] = orig + eps
        ps[g] = p.reshape(base[g].shape)
        plus = f(ps)
        p[j] = orig - eps
        minus = f(ps)
        num = float((plus - minus) / (2 * eps))
        ana = float(np.asarray(analytic[g]).reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        name = named[g][0]
        if name not in groups or err > groups[name][0]:
            groups[name] = (err, tuple(int(i) for i in np.unravel_index(j, base[g].shape)), ana, num)
    return GradcheckReport(groups, epsilon, float(floor), len(entries))
