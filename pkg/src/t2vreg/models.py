"""Model configurations, construction, parameter counting and compression.

Five architectures are supported:

* ``dnn``        FC stack, ReLU between hidden layers, linear output
* ``cnn``        4 x (conv -> ReLU -> BatchNorm), flatten, FC hidden layers, linear output
* ``dnn_tt``     ``dnn`` with hidden FC layers held in TT format
* ``cnn_tt``     ``cnn`` with the top FC hidden layers held in TT format
* ``cnn_tucker`` ``cnn`` whose first three convolutions are Tucker-factored
"""

import copy
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import BatchNorm, Conv2D, Dense, Flatten, ReLU, Sequential
from .tensor import Rng
from .tt import TTLayer, TTShape, default_tt_shape, factorize, tt_svd
from .tucker import TuckerConv2D, hosvd_decompose

KINDS = ("dnn", "cnn", "dnn_tt", "cnn_tt", "cnn_tucker")


@dataclass
class ModelConfig:
    kind: str
    freq_bins: int = 257
    context_frames: int = 1
    channels: int = 1
    nat: bool = False
    drop_dc: bool = False
    hidden_dims: list = field(default_factory=list)
    conv_channels: list = field(default_factory=list)
    kernel_sizes: list = field(default_factory=list)
    strides: list = field(default_factory=list)
    fc_dims: list = field(default_factory=list)
    tt_shapes: list = None
    tt_placement: str = "both"
    tt_rank: int = 4
    tt_cores: int = 4
    tucker_ranks: list = None
    tucker_train_factors: bool = True
    output_dim: int = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.output_dim is None:
            self.output_dim = self.bins
        if self.output_dim != self.bins:
            raise ConfigError(f"outputDim must equal the number of frequency bins "
                              f"({self.bins}), got {self.output_dim}")
        if self.context_frames < 1 or self.context_frames % 2 == 0:
            raise ConfigError(f"contextFrames must be odd and >= 1, got {self.context_frames}")
        if self.is_cnn:
            if not (len(self.conv_channels) == len(self.kernel_sizes) >= 1):
                raise ConfigError("convChannels and kernelSizes must be non-empty and equal length")
            if not self.strides:
                self.strides = [[1, 1]] * len(self.conv_channels)
            self.strides = [list(s) for s in self.strides]
            if len(self.strides) != len(self.conv_channels):
                raise ConfigError("strides must have one [time, freq] pair per conv layer")
            if self.nat:
                raise ConfigError("noise-aware features are only supported for DNN inputs")
        if self.kind == "cnn_tucker":
            n_conv = len(self.conv_channels)
            if n_conv < 2:
                raise ConfigError("cnn_tucker needs at least two conv layers")
            if self.tucker_ranks is None:
                raise ConfigError("cnn_tucker requires tuckerRanks")
            if len(self.tucker_ranks) != n_conv - 1:
                raise ConfigError(f"tuckerRanks needs {n_conv - 1} [R_in, R_out] pairs "
                                  f"(all conv layers except the top one)")

    @property
    def bins(self):
        return self.freq_bins - 1 if self.drop_dc else self.freq_bins

    @property
    def is_cnn(self):
        return self.kind.startswith("cnn")

    @property
    def input_shape(self):
        """Per-sample input shape."""
        if self.is_cnn:
            return (self.context_frames, self.bins, self.channels)
        width = self.bins * self.context_frames * self.channels
        if self.nat:
            width += self.bins
        return (width,)

    @property
    def fc_hidden(self):
        return self.fc_dims if self.is_cnn else self.hidden_dims

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, str):
            doc = json.loads(doc)
        inp = doc.get("input", {})
        known = {"kind", "name", "input", "hiddenDims", "convChannels", "kernelSizes", "strides",
                 "fcDims", "ttShapes", "ttPlacement", "ttRank", "ttCores", "tuckerRanks",
                 "tuckerTrainFactors", "outputDim", "comment", "notRunInCI"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("model config needs a 'kind'")
        return cls(
            kind=doc["kind"],
            name=doc.get("name", ""),
            freq_bins=int(inp.get("freqBins", 257)),
            context_frames=int(inp.get("contextFrames", 1)),
            channels=int(inp.get("channels", 1)),
            nat=bool(inp.get("nat", False)),
            drop_dc=bool(inp.get("dropDc", False)),
            hidden_dims=[int(h) for h in doc.get("hiddenDims", [])],
            conv_channels=[int(c) for c in doc.get("convChannels", [])],
            kernel_sizes=[int(k) for k in doc.get("kernelSizes", [])],
            strides=doc.get("strides", []),
            fc_dims=[int(h) for h in doc.get("fcDims", [])],
            tt_shapes=doc.get("ttShapes"),
            tt_placement=doc.get("ttPlacement", "both"),
            tt_rank=int(doc.get("ttRank", 4)),
            tt_cores=int(doc.get("ttCores", 4)),
            tucker_ranks=doc.get("tuckerRanks"),
            tucker_train_factors=bool(doc.get("tuckerTrainFactors", True)),
            output_dim=doc.get("outputDim"),
        )

    def to_json(self):
        doc = {
            "kind": self.kind,
            "input": {"freqBins": self.freq_bins, "contextFrames": self.context_frames,
                      "channels": self.channels, "nat": self.nat, "dropDc": self.drop_dc},
            "outputDim": self.output_dim,
        }
        if self.name:
            doc["name"] = self.name
        if self.is_cnn:
            doc.update(convChannels=self.conv_channels, kernelSizes=self.kernel_sizes,
                       strides=self.strides, fcDims=self.fc_dims)
        else:
            doc["hiddenDims"] = self.hidden_dims
        if self.kind.endswith("_tt"):
            doc.update(ttPlacement=self.tt_placement, ttRank=self.tt_rank, ttCores=self.tt_cores)
            if self.tt_shapes is not None:
                doc["ttShapes"] = self.tt_shapes
        if self.kind == "cnn_tucker":
            doc.update(tuckerRanks=self.tucker_ranks, tuckerTrainFactors=self.tucker_train_factors)
        return doc


def load_config(path):
    with open(path) as f:
        return ModelConfig.from_json(json.load(f))


def shipped_config(name):
    """Load one of the JSON configs bundled in ``t2vreg/configs``."""
    text = resources.files("t2vreg.configs").joinpath(f"{name}.json").read_text()
    return json.loads(text)


class Model(Sequential):
    """A built regression network plus its configuration."""

    def __init__(self, layers, config):
        super().__init__(layers)
        self.config = config

    def predict(self, x, batch_size=256):
        outs = [self.forward(x[i:i + batch_size], train=False)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def layer_param_counts(self):
        return [layer.param_count() for layer in self.layers]

    def summary(self):
        rows = []
        for i, layer in enumerate(self.layers):
            rows.append(f"{i:3d}  {layer.describe():60s} {layer.param_count():>12,d}")
        rows.append(f"     {'total':60s} {count_params(self):>12,d}")
        return "\n".join(rows)


def count_params(model):
    return sum(layer.param_count() for layer in model.layers)


def human_count(n):
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def _tt_shape_list(config, widths):
    """One entry per hidden FC layer: a TTShape or None (dense)."""
    n_hidden = len(config.fc_hidden)
    if config.tt_shapes is not None:
        if len(config.tt_shapes) != n_hidden:
            raise ConfigError(f"ttShapes needs {n_hidden} entries (one per hidden FC layer, "
                              f"null for dense), got {len(config.tt_shapes)}")
        return [None if s is None else TTShape(s["m"], s["n"], s["r"]) for s in config.tt_shapes]
    if config.tt_placement == "both":
        chosen = range(n_hidden)
    elif config.tt_placement == "top":
        chosen = [n_hidden - 1]
    else:
        raise ConfigError(f"ttPlacement must be 'both' or 'top', got {config.tt_placement!r}")
    shapes = [None] * n_hidden
    for i in chosen:
        shapes[i] = default_tt_shape(widths[i], widths[i + 1], config.tt_cores, config.tt_rank)
    return shapes


def build_model(config, rng=None):
    """Instantiate the network described by ``config``.

    Raises ``ConfigError`` naming the first layer whose input shape does not
    fit.
    """
    if isinstance(config, dict):
        config = ModelConfig.from_json(config)
    rng = rng or Rng(0)
    layers = []
    shape = config.input_shape

    def add(layer):
        nonlocal shape
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"layer {len(layers)} ({layer.describe()}): {exc}") from exc
        layers.append(layer)

    if config.is_cnn:
        c_in = config.channels
        for i, (c_out, L, stride) in enumerate(zip(config.conv_channels, config.kernel_sizes,
                                                   config.strides)):
            W, H, _ = shape
            if L > min(W, H):
                raise ConfigError(f"layer {len(layers)} (conv {i}): kernel {L} exceeds "
                                  f"input extents {W}x{H}")
            tucker = config.kind == "cnn_tucker" and i < len(config.conv_channels) - 1
            if tucker:
                r_in, r_out = config.tucker_ranks[i]
                if not (1 <= r_in <= c_in and 1 <= r_out <= c_out):
                    raise ConfigError(f"layer {len(layers)} (conv {i}): Tucker ranks "
                                      f"({r_in}, {r_out}) infeasible for {c_in}->{c_out} channels")
                add(TuckerConv2D.random(L, c_in, c_out, r_in, r_out, stride, rng,
                                        train_factors=config.tucker_train_factors))
            else:
                add(Conv2D(L, c_in, c_out, stride, rng))
            add(ReLU())
            add(BatchNorm(c_out))
            c_in = c_out
        add(Flatten())

    widths = [shape[0]] + list(config.fc_hidden)
    tt_shapes = (_tt_shape_list(config, widths) if config.kind.endswith("_tt")
                 else [None] * len(config.fc_hidden))
    for i, width in enumerate(config.fc_hidden):
        tt_shape = tt_shapes[i]
        if tt_shape is None:
            add(Dense(widths[i], width, rng))
        else:
            if tt_shape.cols != widths[i] or tt_shape.rows != width:
                raise ConfigError(
                    f"layer {len(layers)} (TT hidden {i}): TT shape maps {tt_shape.cols} -> "
                    f"{tt_shape.rows} but the layer must map {widths[i]} -> {width}")
            add(TTLayer(tt_shape, rng))
        add(ReLU())
    add(Dense(widths[-1], config.output_dim, rng))
    return Model(layers, config)


# --- compression ----------------------------------------------------------------

_TARGETS = {"dnn": ("dnn_tt",), "cnn": ("cnn_tt", "cnn_tucker")}


def _tt_caps(ranks, index, K):
    """Rank caps for one layer from a rank spec (None/'full', int, or per-layer list)."""
    if ranks is None or ranks == "full":
        return None
    if isinstance(ranks, (list, tuple)):
        if index >= len(ranks):
            raise ConfigError(f"rank spec has no entry for TT layer {index}")
        entry = ranks[index]
        if entry is None or entry == "full":
            return None
        return [int(r) for r in entry] if isinstance(entry, (list, tuple)) else int(entry)
    return int(ranks)


def compress_model(model, target_kind, ranks=None, tt_cores=4, tt_placement="both",
                   train_factors=False):
    """Factor a trained model's layers from its own weights.

    ``ranks`` is ``None``/``"full"`` for exact factorization, an int cap, or a
    per-layer list.  For Tucker, a per-layer entry is an ``[R_in, R_out]``
    pair.  Layers that are not factored are copied unchanged.  Returns the
    new model and a report dict.
    """
    src_kind = model.config.kind
    if target_kind not in _TARGETS.get(src_kind, ()):
        raise ConfigError(f"cannot compress a {src_kind!r} model into {target_kind!r}")
    layers = [copy.deepcopy(layer) for layer in model.layers]
    cfg = copy.deepcopy(model.config)
    cfg.kind = target_kind
    per_layer = []

    if target_kind.endswith("_tt"):
        dense_idx = [i for i, layer in enumerate(layers) if isinstance(layer, Dense)][:-1]
        chosen = dense_idx if tt_placement == "both" else dense_idx[-1:]
        shapes = [None] * len(dense_idx)
        for t, i in enumerate(chosen):
            layer = layers[i]
            caps = _tt_caps(ranks, t, tt_cores)
            if caps is not None and (np.min(caps) if np.ndim(caps) else caps) < 1:
                raise ConfigError(f"layer {i} ({layer.describe()}): TT rank {caps} infeasible")
            m = factorize(layer.n_out, tt_cores)
            n = factorize(layer.n_in, tt_cores)
            try:
                res = tt_svd(layer.params["weight"].T, m, n, max_ranks=caps, return_info=True)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.describe()}): {exc}") from exc
            new = TTLayer(cores=res.tt, bias=layer.params["bias"].copy())
            per_layer.append({"layer": i, "from": layer.describe(), "to": new.describe(),
                              "oldParams": layer.param_count(), "newParams": new.param_count(),
                              "error": res.error, "errorBound": res.error_bound})
            layers[i] = new
            shapes[dense_idx.index(i)] = res.tt.shape.to_json()
        cfg.tt_shapes = shapes
        cfg.tt_placement = tt_placement
        cfg.tt_cores = tt_cores
    else:
        conv_idx = [i for i, layer in enumerate(layers) if isinstance(layer, Conv2D)]
        tucker_ranks = []
        for t, i in enumerate(conv_idx[:-1]):
            layer = layers[i]
            C, S = layer.c_in, layer.c_out
            if ranks is None or ranks == "full":
                r_in, r_out = C, S
            elif isinstance(ranks, (list, tuple)):
                if t >= len(ranks):
                    raise ConfigError(f"rank spec has no entry for conv layer {i}")
                spec = ranks[t]
                r_in, r_out = (spec, spec) if np.isscalar(spec) else spec
            else:
                r_in, r_out = min(int(ranks), C), min(int(ranks), S)
            if not (1 <= r_in <= C and 1 <= r_out <= S):
                raise ConfigError(f"layer {i} ({layer.describe()}): Tucker ranks "
                                  f"({r_in}, {r_out}) infeasible for C={C}, S={S}")
            tk = hosvd_decompose(layer.params["kernel"], int(r_in), int(r_out))
            new = TuckerConv2D(tk, stride=layer.stride, bias=layer.params["bias"].copy(),
                               train_factors=train_factors)
            per_layer.append({"layer": i, "from": layer.describe(), "to": new.describe(),
                              "oldParams": layer.param_count(), "newParams": new.param_count(),
                              "error": tk.error, "errorBound": tk.error_bound})
            layers[i] = new
            tucker_ranks.append([int(r_in), int(r_out)])
        cfg.tucker_ranks = tucker_ranks
        cfg.tucker_train_factors = train_factors
    new_model = Model(layers, cfg)
    report = {"oldParams": count_params(model), "newParams": count_params(new_model),
              "layers": per_layer}
    return new_model, report


def output_difference(a, b, n_inputs=100, rng=None):
    """Max abs output difference of two models on random inputs (infer mode)."""
    rng = rng or Rng(12345)
    x = rng.normal((n_inputs,) + tuple(a.config.input_shape))
    return float(np.max(np.abs(a.predict(x) - b.predict(x))))
