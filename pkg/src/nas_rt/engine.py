"""Bilevel search loop and from-scratch retraining of decoded networks.

The search has two phases: a warmup where only network weights move (the
architecture parameters stay bitwise frozen), then strict alternation of one
weight step on the weight split and one architecture step on the arch split.
Weights use SGD with momentum; architecture parameters use plain SGD. The
weight step optimizes cross-entropy alone (the latency term has no weight
dependence); the architecture step optimizes CE + lambda * LAT.

Checkpoints are a JSON header (configs, epoch, rng states, history) followed
by raw little-endian float64 arrays addressed by a (name, shape, offset)
manifest, so a resumed run continues bit-identically.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as dio
from . import decode as dec
from . import latency as lat
from . import ops, space
from .errors import ConfigError, DataError, FormatError

CHECKPOINT_MAGIC = b"NRT1"


@dataclass
class TrainConfig:
    total_epochs: int = 30
    warmup_epochs: int = 15
    batch_size: int = 2
    lr_w: float = 0.1
    momentum: float = 0.9
    lr_arch: float = 0.1
    lambda_lat: float = 1e-4
    tau_start: float = 5.0
    tau_end: float = 0.5
    seed: int = 0
    n_fusion: int = 2
    latency_accounting: str = "per_path"
    augment: bool = False

    def validate(self):
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_epochs}) < total ({self.total_epochs})")
        if self.lambda_lat < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr_w <= 0 or self.lr_arch <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("tau schedule must stay positive")
        if self.latency_accounting not in ("per_path", "union"):
            raise ConfigError(f"unknown latency accounting {self.latency_accounting!r}")
        return self

    def tau_at(self, arch_epoch, arch_epochs):
        frac = arch_epoch / max(1, arch_epochs - 1)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac

    def to_dict(self):
        return {
            "total_epochs": self.total_epochs, "warmup_epochs": self.warmup_epochs,
            "batch_size": self.batch_size, "lr_w": self.lr_w,
            "momentum": self.momentum, "lr_arch": self.lr_arch,
            "lambda_lat": self.lambda_lat, "tau_start": self.tau_start,
            "tau_end": self.tau_end, "seed": self.seed, "n_fusion": self.n_fusion,
            "latency_accounting": self.latency_accounting, "augment": self.augment,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class SGD:
    """SGD over named tensors; classic momentum when mu > 0."""

    def __init__(self, named_params, lr, momentum=0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params.items()} \
            if momentum > 0 else {}

    def step(self):
        for name in sorted(self.params):
            t = self.params[name]
            if t.grad is None:
                continue
            if self.momentum > 0:
                v = self.velocity[name]
                v *= self.momentum
                v += t.grad
                t.data -= self.lr * v
            else:
                t.data -= self.lr * t.grad

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _batches(dataset, order, batch_size, augment_rng=None):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        samples = [dataset.samples[i] for i in idx]
        if augment_rng is not None:
            samples = [dio.augment(s, augment_rng) for s in samples]
        x = ad.Tensor(np.stack([s.image for s in samples]))
        y = np.stack([s.label for s in samples])
        yield x, y


def hardware_aware_loss(net, params, batch_x, batch_y, table, cfg, train_cfg,
                        tau, rng, paths=None):
    """total = CE + lambda * LAT. With lambda == 0 the latency model (and the
    table) is never touched and total is the CE tensor itself."""
    logits = space.network_forward(net, batch_x, params)
    ce = ops.cross_entropy(logits, batch_y)
    if train_cfg.lambda_lat == 0.0:
        return ce, ce, ad.Tensor(np.array(0.0))
    latency = lat.expected_network_latency(
        params, table, cfg, tau, rng, n=train_cfg.n_fusion, paths=paths,
        accounting=train_cfg.latency_accounting)
    total = ad.add(ce, ad.scale(latency, train_cfg.lambda_lat))
    for name, value in (("ce", ce), ("lat", latency), ("total", total)):
        if not np.isfinite(value.item()):
            raise DataError(f"non-finite {name} loss")
    return total, ce, latency


class SearchState:
    def __init__(self, cfg, train_cfg):
        seq = np.random.SeedSequence(train_cfg.seed)
        init_ss, data_ss, gumbel_ss, eval_ss = seq.spawn(4)
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.net, self.params = space.build_supernet(cfg, init_ss)
        self.opt_w = SGD(self.net.named_parameters(), train_cfg.lr_w,
                         train_cfg.momentum)
        self.opt_arch = SGD(self.params.named_parameters(), train_cfg.lr_arch)
        self.data_rng = np.random.default_rng(data_ss)
        self.gumbel_rng = np.random.default_rng(gumbel_ss)
        self.eval_seed = eval_ss.generate_state(1)[0].item()
        self.epoch = 0
        self.step = 0
        self.history = []
        self.final_ce = None
        self.final_lat = None

    def record(self, phase, ce, latency, total, tau):
        self.history.append({"step": self.step, "phase": phase, "ce": ce,
                             "lat": latency, "total": total, "tau": tau})
        self.step += 1

    def named_arrays(self):
        arrays = {}
        for name, t in {**self.net.named_parameters(),
                        **self.params.named_parameters()}.items():
            arrays[name] = t.data
        for name, v in self.opt_w.velocity.items():
            arrays[f"momentum/{name}"] = v
        return arrays

    def save(self, path):
        header = {
            "kind": "search_checkpoint",
            "search_config": self.cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
            "rng": {"data": self.data_rng.bit_generator.state,
                    "gumbel": self.gumbel_rng.bit_generator.state},
            "eval_seed": self.eval_seed,
            "final": {"ce": self.final_ce, "lat": self.final_lat},
        }
        save_blob(path, header, self.named_arrays())

    @classmethod
    def load(cls, path):
        header, arrays = load_blob(path)
        if header.get("kind") != "search_checkpoint":
            raise FormatError(f"not a search checkpoint: {header.get('kind')!r}")
        cfg = space.SearchConfig.from_dict(header["search_config"])
        train_cfg = TrainConfig.from_dict(header["train_config"])
        state = cls(cfg, train_cfg)
        named = {**state.net.named_parameters(), **state.params.named_parameters()}
        for name, t in named.items():
            t.data[...] = arrays[name].reshape(t.data.shape)
        for name, v in state.opt_w.velocity.items():
            v[...] = arrays[f"momentum/{name}"].reshape(v.shape)
        state.data_rng.bit_generator.state = header["rng"]["data"]
        state.gumbel_rng.bit_generator.state = header["rng"]["gumbel"]
        state.eval_seed = header["eval_seed"]
        state.epoch = header["epoch"]
        state.step = header["step"]
        state.history = header["history"]
        state.final_ce = header["final"]["ce"]
        state.final_lat = header["final"]["lat"]
        return state


def save_blob(path, header, arrays):
    manifest = []
    offset = 0
    ordered = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append([name, list(a.shape), offset])
        ordered.append(a)
        offset += a.nbytes
    header = dict(header)
    header["manifest"] = manifest
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for a in ordered:
            fh.write(a.tobytes())


def load_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    blob = raw[8 + hlen:]
    arrays = {}
    for name, shape, offset in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise FormatError(f"truncated array {name!r}", offset=8 + hlen + offset)
        arrays[name] = np.frombuffer(
            blob[offset:end], dtype="<f8").reshape(shape).copy()
    return header, arrays


def _epoch_order(rng, n):
    return rng.permutation(n).tolist()


def search(dataset_weight, dataset_arch, cfg, train_cfg, table, state=None,
           stop_epoch=None):
    """Run (or resume) the bilevel search; returns the SearchState.

    stop_epoch pauses the schedule early (e.g. to checkpoint); the final
    CE/latency evaluations only happen once the full schedule has run.
    """
    cfg.validate()
    train_cfg.validate()
    if not dataset_weight.samples or not dataset_arch.samples:
        raise DataError("search needs non-empty weight and arch splits")
    if state is None:
        state = SearchState(cfg, train_cfg)
    arch_epochs = train_cfg.total_epochs - train_cfg.warmup_epochs
    last_epoch = train_cfg.total_epochs if stop_epoch is None \
        else min(stop_epoch, train_cfg.total_epochs)
    while state.epoch < last_epoch:
        epoch = state.epoch
        in_warmup = epoch < train_cfg.warmup_epochs
        tau = train_cfg.tau_start if in_warmup else \
            train_cfg.tau_at(epoch - train_cfg.warmup_epochs, arch_epochs)
        w_order = _epoch_order(state.data_rng, len(dataset_weight.samples))
        a_order = _epoch_order(state.data_rng, len(dataset_arch.samples))
        aug = state.data_rng if train_cfg.augment else None
        w_batches = list(_batches(dataset_weight, w_order, train_cfg.batch_size,
                                  augment_rng=aug))
        a_batches = list(_batches(dataset_arch, a_order, train_cfg.batch_size,
                                  augment_rng=aug))
        for it, (wx, wy) in enumerate(w_batches):
            logits = space.network_forward(state.net, wx, state.params)
            ce = ops.cross_entropy(logits, wy)
            state.opt_w.zero_grad()
            state.opt_arch.zero_grad()
            ad.backward(ce)
            state.opt_w.step()
            ce_v = ce.item()
            state.record("w", ce_v, 0.0, ce_v, tau)
            if in_warmup:
                continue
            ax, ay = a_batches[it % len(a_batches)]
            noise = lat.GumbelNoise(state.gumbel_rng)
            total, ce_t, lat_t = hardware_aware_loss(
                state.net, state.params, ax, ay, table, cfg, train_cfg, tau, noise)
            state.opt_w.zero_grad()
            state.opt_arch.zero_grad()
            ad.backward(total)
            state.opt_arch.step()
            state.record("arch", ce_t.item(), lat_t.item(), total.item(), tau)
        state.opt_w.zero_grad()
        state.opt_arch.zero_grad()
        state.epoch += 1
    if state.epoch == train_cfg.total_epochs:
        state.final_ce = evaluate_ce(state.net, state.params, dataset_arch,
                                     train_cfg.batch_size)
        state.final_lat = evaluate_latency_term(state, table)
    return state


def evaluate_ce(net, params, dataset, batch_size):
    """Mean CE over a dataset without updating anything."""
    total, count = 0.0, 0
    order = list(range(len(dataset.samples)))
    for x, y in _batches(dataset, order, batch_size):
        ce = ops.cross_entropy(space.network_forward(net, x, params), y)
        total += ce.item() * y.shape[0]
        count += y.shape[0]
    return total / count


def evaluate_latency_term(state, table):
    """Expected latency of the current parameters at the final temperature,
    with a fixed evaluation seed so runs stay comparable."""
    rng = np.random.default_rng(state.eval_seed)
    value = lat.expected_network_latency(
        state.params, table, state.cfg, state.train_cfg.tau_end, rng,
        n=state.train_cfg.n_fusion,
        accounting=state.train_cfg.latency_accounting)
    return value.item()


@dataclass
class RetrainResult:
    net: object
    history: list          # per-step {"epoch", "step", "loss"}
    epoch_losses: list
    dice: dict             # class id -> score on the eval set
    latency_s: float

    def metrics(self):
        fg = {str(c): v for c, v in self.dice.items() if c != 0}
        vals = list(fg.values())
        return {
            "dice": {"per_class": fg,
                     "mean": float(np.mean(vals)),
                     "std": float(np.std(vals))},
            "latency_ms": self.latency_s * 1000.0,
            "throughput_fps": (1000.0 / (self.latency_s * 1000.0)
                               if self.latency_s > 0 else float("inf")),
        }


def retrain(arch, train_ds, eval_ds, train_cfg, epochs=None, rng_seed=None,
            measure_reps=20):
    """Train a decoded architecture from scratch and score it held-out."""
    train_cfg.validate()
    if not train_ds.samples:
        raise DataError("retrain needs a non-empty training set")
    if not eval_ds.samples:
        raise DataError("retrain needs a non-empty evaluation set")
    epochs = epochs if epochs is not None else train_cfg.total_epochs
    seed = train_cfg.seed if rng_seed is None else rng_seed
    seq = np.random.SeedSequence([seed, 0xD15C])
    init_ss, data_ss = seq.spawn(2)
    net = dec.DiscreteNetwork(arch, rng_seed=init_ss)
    opt = SGD(net.named_parameters(), train_cfg.lr_w, train_cfg.momentum)
    data_rng = np.random.default_rng(data_ss)
    history = []
    epoch_losses = []
    step = 0
    for epoch in range(epochs):
        order = _epoch_order(data_rng, len(train_ds.samples))
        losses = []
        aug = data_rng if train_cfg.augment else None
        for x, y in _batches(train_ds, order, train_cfg.batch_size,
                             augment_rng=aug):
            loss = ops.cross_entropy(net.forward(x), y)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            v = loss.item()
            losses.append(v)
            history.append({"epoch": epoch, "step": step, "loss": v})
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    dice = evaluate_dice(net, eval_ds)
    latency_s = dec.measure_inference(net, reps=measure_reps)
    return RetrainResult(net=net, history=history, epoch_losses=epoch_losses,
                         dice=dice, latency_s=latency_s)


def evaluate_dice(net, dataset):
    """Per-class Dice of argmax predictions over a dataset."""
    preds, trues = [], []
    with ad.no_grad():
        for i in range(len(dataset.samples)):
            s = dataset.samples[i]
            logits = net.forward(ad.Tensor(s.image[None]))
            preds.append(np.argmax(logits.data[0], axis=0))
            trues.append(s.label)
    pred = np.stack(preds)
    true = np.stack(trues)
    return {c: ops.dice_score(pred, true, c) for c in range(dataset.num_classes)}
