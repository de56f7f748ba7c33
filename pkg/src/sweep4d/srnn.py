"""Respiratory-state classifier: similarity windows + 3-layer bidirectional LSTM.

Each training sample is the cosine-similarity matrix of a run of W
consecutive slices (mean-subtracted, so entries equal slice-to-slice NCC);
the label is the respiratory state of the window's last slice.  Rows of the
matrix are the LSTM timestep inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .breath import RespiratoryLabeling
from .errors import ConfigError, DataError, NumericError
from .volume import SliceStack

GATE_ORDER = "ifgo"  # input, forget, cell, output


@dataclass(frozen=True)
class SimilarityWindow:
    """W x W slice-similarity matrix ending at ``last_slice_index``."""

    matrix: np.ndarray
    last_slice_index: int
    label: int | None = None

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError("similarity matrix must be square")
        if not np.allclose(m, m.T, atol=1e-9):
            raise DataError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-9):
            raise DataError("similarity matrix must have unit diagonal")


@dataclass
class TrainConfig:
    lr: float = 0.1
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    window: int = 20
    stride: int = 19  # 1-slice overlap between consecutive training windows
    hidden: int = 64
    layers: int = 3
    num_states: int = 10
    val_fraction: float = 0.1
    lr_probe_epochs: int = 10
    max_lr_halvings: int = 6
    lr_decay: str = "cosine"  # cosine | constant

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_decay not in ("cosine", "constant"):
            raise ConfigError("lr_decay must be 'cosine' or 'constant'")
        if self.window < 2:
            raise ConfigError("window must be >= 2")


class BiLstmModel:
    """Stacked bidirectional LSTM with a K-way linear head.

    Layer l (l = 0..L-1) has forward and backward cells; each cell owns
    Wx (D_l, 4H), Wh (H, 4H) and bias (4H) with gate order i, f, g, o.
    The head maps concat(h_fwd at t=W-1, h_bwd at t=0) -> K logits.
    """

    CHECKPOINT_VERSION = 1

    def __init__(self, input_dim, hidden, layers, num_states, seed=0):
        self.input_dim = input_dim
        self.hidden = hidden
        self.layers = layers
        self.num_states = num_states
        self.seed = seed
        rng = np.random.default_rng(seed)
        k = 1.0 / np.sqrt(hidden)
        self.params: dict[str, Tensor] = {}
        for layer in range(layers):
            d_in = input_dim if layer == 0 else 2 * hidden
            for direction in ("f", "b"):
                pre = f"l{layer}{direction}"
                self._add(rng, f"{pre}_Wx", (d_in, 4 * hidden), k)
                self._add(rng, f"{pre}_Wh", (hidden, 4 * hidden), k)
                self._add(rng, f"{pre}_bias", (4 * hidden,), k)
        self._add(rng, "head_W", (2 * hidden, num_states), k)
        self._add(rng, "head_b", (num_states,), k)

    def _add(self, rng, name, shape, k):
        self.params[name] = Tensor(rng.uniform(-k, k, size=shape), requires_grad=True)

    @property
    def param_list(self):
        return [self.params[n] for n in sorted(self.params)]

    def state_copy(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, p in self.params.items():
            p.data = state[n].copy()

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> Tensor:
        """Logits for a batch of windows ``x`` of shape (B, W, D)."""
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise DataError(f"window batch shape {x.shape} does not match model "
                            f"input dim {self.input_dim}")
        # per-window standardization: similarity matrices sit in a narrow
        # band near 1, and the recurrent gates barely respond to the raw
        # values; centering/scaling restores a usable input range
        mu = x.mean(axis=(1, 2), keepdims=True)
        sd = x.std(axis=(1, 2), keepdims=True)
        x = (x - mu) / (sd + 1e-8)
        W = x.shape[1]
        seq = [Tensor(x[:, t, :]) for t in range(W)]
        for layer in range(self.layers):
            hs_f = self._run_direction(seq, layer, "f")
            hs_b = self._run_direction(seq, layer, "b")
            seq = [ad.concat([hf, hb], axis=1) for hf, hb in zip(hs_f, hs_b)]
            last_f, first_b = hs_f[-1], hs_b[0]
        head_in = ad.concat([last_f, first_b], axis=1)
        return ad.add(ad.matmul(head_in, self.params["head_W"]),
                      self.params["head_b"])

    def _run_direction(self, seq, layer, direction):
        H = self.hidden
        B = seq[0].data.shape[0]
        Wx = self.params[f"l{layer}{direction}_Wx"]
        Wh = self.params[f"l{layer}{direction}_Wh"]
        bias = self.params[f"l{layer}{direction}_bias"]
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        order = range(len(seq)) if direction == "f" else range(len(seq) - 1, -1, -1)
        hs = [None] * len(seq)
        for t in order:
            gates = ad.add(ad.add(ad.matmul(seq[t], Wx), ad.matmul(h, Wh)), bias)
            i = ad.sigmoid(ad.index(gates, (slice(None), slice(0, H))))
            f = ad.sigmoid(ad.index(gates, (slice(None), slice(H, 2 * H))))
            g = ad.tanh(ad.index(gates, (slice(None), slice(2 * H, 3 * H))))
            o = ad.sigmoid(ad.index(gates, (slice(None), slice(3 * H, 4 * H))))
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            hs[t] = h
        return hs

    # -- checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        base = Path(path).with_suffix("")
        base.parent.mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        payload = np.concatenate(
            [self.params[n].data.ravel() for n in names]
        ).astype("<f4")
        payload.tofile(base.with_suffix(".f32"))
        meta = {
            "version": self.CHECKPOINT_VERSION,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "layers": self.layers,
            "num_states": self.num_states,
            "seed": self.seed,
            "param_shapes": {n: list(self.params[n].data.shape) for n in names},
        }
        with open(base.with_suffix(".json"), "w") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, path) -> "BiLstmModel":
        base = Path(path).with_suffix("")
        meta_path = base.with_suffix(".json")
        payload_path = base.with_suffix(".f32")
        if not meta_path.exists() or not payload_path.exists():
            raise DataError(f"missing checkpoint files {base}.json/.f32")
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("version") != cls.CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        model = cls(meta["input_dim"], meta["hidden"], meta["layers"],
                    meta["num_states"], meta.get("seed", 0))
        raw = np.fromfile(payload_path, dtype="<f4").astype(np.float64)
        offset = 0
        for n in sorted(model.params):
            shape = tuple(meta["param_shapes"][n])
            size = int(np.prod(shape))
            if offset + size > raw.size:
                raise DataError("checkpoint payload too short")
            model.params[n].data = raw[offset:offset + size].reshape(shape)
            offset += size
        if offset != raw.size:
            raise DataError("checkpoint payload length mismatch")
        return model


def bilstm_forward(model: BiLstmModel, window: SimilarityWindow) -> np.ndarray:
    """K logits for one window (inference convenience wrapper)."""
    return model.forward(window.matrix[None, :, :]).data[0]


# ---------------------------------------------------------------------------
# window construction


def _normalized_slices(stack: SliceStack) -> np.ndarray:
    z = stack.data.reshape(stack.T, -1).astype(np.float64)
    z = z - z.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return z / norms


def build_windows(stack: SliceStack, labeling: RespiratoryLabeling | None,
                  W: int = 20, stride: int | None = None) -> list[SimilarityWindow]:
    """Training windows: starts every ``stride`` slices (default W-1)."""
    if stack.T < W:
        raise DataError(f"stack has {stack.T} slices, need at least {W}")
    if stride is None:
        stride = W - 1
    z = _normalized_slices(stack)
    gram = z @ z.T
    np.fill_diagonal(gram, 1.0)
    gram = np.clip(gram, -1.0, 1.0)
    windows = []
    for s in range(0, stack.T - W + 1, stride):
        label = int(labeling.states[s + W - 1]) if labeling is not None else None
        windows.append(SimilarityWindow(matrix=gram[s:s + W, s:s + W].copy(),
                                        last_slice_index=s + W - 1,
                                        label=label))
    return windows


def inference_windows(stack: SliceStack, W: int = 20) -> np.ndarray:
    """One window per slice (stride 1), mirror-padding the sequence start.

    Returns an array (T, W, W); window t ends at slice t, with negative
    indices mirrored (-k -> k) so early slices still get a full window.
    """
    if stack.T < W:
        raise DataError(f"stack has {stack.T} slices, need at least {W}")
    z = _normalized_slices(stack)
    out = np.empty((stack.T, W, W))
    for t in range(stack.T):
        idx = np.abs(np.arange(t - W + 1, t + 1))
        zi = z[idx]
        m = zi @ zi.T
        np.fill_diagonal(m, 1.0)
        out[t] = np.clip(m, -1.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# training


def _cross_entropy(logits: Tensor, labels: np.ndarray, num_states: int) -> Tensor:
    m = logits.data.max(axis=1, keepdims=True)  # detached shift, exact gradient
    z = ad.add(logits, Tensor(-m))
    lse = ad.tlog(ad.tsum(ad.texp(z), axis=1))
    onehot = np.zeros((len(labels), num_states))
    onehot[np.arange(len(labels)), labels] = 1.0
    target = ad.tsum(ad.mul(z, Tensor(onehot)), axis=1)
    return ad.tmean(ad.add(lse, ad.mul(target, Tensor(-1.0))))


def train_srnn(windows: list[SimilarityWindow], config: TrainConfig):
    """Train on labeled windows; returns (model, history).

    Keeps the best-validation-accuracy checkpoint over a seeded 90/10 split
    by window start index.  If the configured lr diverges, it is halved
    until the probe loss decreases; the sweep is recorded in the history.
    """
    labeled = [w for w in windows if w.label is not None]
    if not labeled:
        raise DataError("no labeled windows")
    labels = np.array([w.label for w in labeled], dtype=int)
    if len(np.unique(labels)) < 2:
        raise DataError("single-class training set is degenerate")
    x = np.stack([w.matrix for w in labeled])
    W = x.shape[1]

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(labeled))
    n_val = max(1, int(round(config.val_fraction * len(labeled))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    x_train, y_train = x[train_idx], labels[train_idx]
    x_val, y_val = x[val_idx], labels[val_idx]

    lr = config.lr
    sweep = []
    for attempt in range(config.max_lr_halvings + 1):
        model = BiLstmModel(W, config.hidden, config.layers,
                            config.num_states, seed=config.seed)
        result = _run_training(model, x_train, y_train, x_val, y_val, config, lr)
        sweep.append({"lr": lr, "stable": result["stable"],
                      "probe_losses": result["losses"][:config.lr_probe_epochs]})
        if result["stable"]:
            break
        lr *= 0.5
    else:
        raise NumericError("training diverged at every attempted learning rate")

    model.load_state(result["best_state"])
    history = {
        "lr": lr,
        "lr_sweep": sweep,
        "losses": result["losses"],
        "val_accuracy": result["val_accuracy"],
        "best_val_accuracy": result["best_val_accuracy"],
    }
    return model, history


def _run_training(model, x_train, y_train, x_val, y_val, config, lr):
    adam = ad.AdamState(lr=lr, weight_decay=config.weight_decay)
    params = model.param_list
    rng = np.random.default_rng(config.seed + 1)
    losses, val_acc = [], []
    best_acc, best_state = -1.0, model.state_copy()
    probe = min(config.lr_probe_epochs, config.epochs)
    for epoch in range(config.epochs):
        if config.lr_decay == "cosine":
            # anneal to ~0 over the run; the late small steps settle the
            # boundary windows that a constant lr keeps bouncing across
            adam.lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch /
                                               max(1, config.epochs - 1)))
        order = rng.permutation(len(x_train))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for p in params:
                p.zero_grad()
            with ad.Tape():
                logits = model.forward(x_train[batch])
                loss = _cross_entropy(logits, y_train[batch], config.num_states)
                ad.backward(loss)
            ad.adam_step(params, adam)
            epoch_losses.append(float(loss.data))
        losses.append(float(np.mean(epoch_losses)))
        acc = float(np.mean(_predict_batch(model, x_val) == y_val))
        val_acc.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_state = model.state_copy()
        if epoch == probe - 1:
            finite = np.isfinite(losses).all()
            if not finite or (probe > 1 and losses[-1] >= losses[0]):
                return {"stable": False, "losses": losses, "val_accuracy": val_acc,
                        "best_val_accuracy": best_acc, "best_state": best_state}
    return {"stable": True, "losses": losses, "val_accuracy": val_acc,
            "best_val_accuracy": best_acc, "best_state": best_state}


def _predict_batch(model, x, chunk=256) -> np.ndarray:
    preds = []
    for start in range(0, len(x), chunk):
        logits = model.forward(x[start:start + chunk]).data
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=int)


def predict_states(model: BiLstmModel, stack: SliceStack, W: int = 20) -> RespiratoryLabeling:
    """Per-slice argmax states with source tag 'srnn' (deterministic)."""
    x = inference_windows(stack, W)
    states = _predict_batch(model, x)
    return RespiratoryLabeling.from_states(states, model.num_states, "srnn")
