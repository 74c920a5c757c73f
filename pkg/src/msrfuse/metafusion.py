"""Hypernetwork meta layers fused with a multi-scenario backbone.

Two small hypernetworks consume fixed knowledge vectors (one per user, one
per scenario) and emit flattened weights/biases that are reshaped into a
stack of generated dense layers. The user-level stack sits at the bottom and
transforms the embedding before the backbone; the scenario-level stack sits
in parallel and produces a logit that is blended with the backbone logit by
a learnable scalar. Ablation variants rewire which stack exists and where.

Knowledge vectors are constant inputs: no gradient ever flows into the
vector store. The dynamic-network baseline reuses the same machinery but
conditions on the learned scenario embedding instead, so there gradients do
flow back into the embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import BackboneConfig, EmbeddingLayer, make_backbone
from .data import FeatureSchema
from .gradcore import (Array, BackwardStateError, Dense, Parameter,
                       ShapeMismatchError, glorot_uniform, sigmoid)
from .knowledge import VectorStore

ARCHITECTURES = ("full", "user_bottom_only", "user_parallel_only",
                 "domain_bottom_only", "domain_parallel_only", "backbone_only")
BASELINES = ("none", "epnet", "dynnet")
PARALLEL_INPUTS = ("bottom_out", "embedding")

# Which (bottom stack, parallel stack) sources each architecture wires up.
_ARCH_WIRING: dict[str, tuple[str | None, str | None]] = {
    "full": ("user", "domain"),
    "user_bottom_only": ("user", None),
    "user_parallel_only": (None, "user"),
    "domain_bottom_only": ("domain", None),
    "domain_parallel_only": (None, "domain"),
    "backbone_only": (None, None),
}


@dataclass(frozen=True)
class LayerDims:
    """Width plan [d_0, ..., d_K] of a generated stack of K dense layers."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ValueError(f"need at least [d_in, d_out], got {list(self.dims)}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"all widths must be >= 1, got {list(self.dims)}")

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def flat_weight_dim(self) -> int:
        return sum(self.dims[i] * self.dims[i + 1] for i in range(self.n_layers))

    @property
    def flat_bias_dim(self) -> int:
        return sum(self.dims[1:])


def default_bottom_dims(d_e: int, n_layers: int, hidden: int | None = None) -> LayerDims:
    """Dimension-preserving plan [d_e, h, ..., h, d_e]; h defaults to d_e/2."""
    if hidden is None:
        hidden = max(d_e // 2, 1)
    return LayerDims((d_e, *([hidden] * (n_layers - 1)), d_e)) if n_layers > 1 \
        else LayerDims((d_e, d_e))


def default_parallel_dims(d_e: int, n_layers: int, hidden: int = 64) -> LayerDims:
    """Logit-producing plan [d_e, h, ..., h, 1]."""
    return LayerDims((d_e, *([hidden] * (n_layers - 1)), 1))


class GeneratedStack:
    """K generated dense layers with per-entity weights.

    ``weights[i]`` has shape [N_ent, d_i, d_{i+1}] and a row vector is pushed
    through its own entity's matrices: ``h = act(h @ W + b)``, ReLU on
    interior layers and identity on the last. ``entity_of_row`` maps batch
    rows to entities (identity when None, i.e. one stack per row).
    """

    def __init__(self, dims: LayerDims, weights: list[Array], biases: list[Array],
                 entity_of_row: Array | None = None):
        self.dims = dims
        self.weights = weights
        self.biases = biases
        self.entity_of_row = entity_of_row
        self.num_entities = weights[0].shape[0]
        self._cache = None

    def forward(self, x: Array) -> Array:
        if x.shape[1] != self.dims.dims[0]:
            raise ShapeMismatchError(
                f"generated stack: input shape {x.shape} does not match plan "
                f"{list(self.dims.dims)}")
        ent = self.entity_of_row
        if ent is None and x.shape[0] != self.num_entities:
            raise ShapeMismatchError(
                f"generated stack: {x.shape[0]} rows but {self.num_entities} per-row stacks")
        saved = []
        h = x
        k = self.dims.n_layers
        for i in range(k):
            w = self.weights[i] if ent is None else self.weights[i][ent]
            b = self.biases[i] if ent is None else self.biases[i][ent]
            z = np.einsum("bi,bij->bj", h, w) + b
            out = np.maximum(z, 0.0) if i < k - 1 else z
            saved.append((h, z, w))
            h = out
        self._cache = saved
        return h

    def backward(self, d_out: Array) -> tuple[Array, Array, Array]:
        """Returns (d_input, d_flat_weights, d_flat_biases); the flat parts are
        per-entity and laid out exactly like the hypernetwork heads."""
        if self._cache is None:
            raise BackwardStateError("generated stack: backward() without forward()")
        saved, self._cache = self._cache, None
        ent = self.entity_of_row
        k = self.dims.n_layers
        d_w_flat_parts: list[Array] = [None] * k  # type: ignore[list-item]
        d_b_flat_parts: list[Array] = [None] * k  # type: ignore[list-item]
        dh = d_out
        for i in reversed(range(k)):
            h_in, z, w = saved[i]
            dz = dh if i == k - 1 else dh * (z > 0.0)
            dw_rows = np.einsum("bi,bj->bij", h_in, dz)
            if ent is None:
                dw, db = dw_rows, dz
            else:
                dw = np.zeros_like(self.weights[i])
                db = np.zeros_like(self.biases[i])
                np.add.at(dw, ent, dw_rows)
                np.add.at(db, ent, dz)
            d_w_flat_parts[i] = dw.reshape(self.num_entities, -1)
            d_b_flat_parts[i] = db
            dh = np.einsum("bj,bij->bi", dz, w)
        return dh, np.concatenate(d_w_flat_parts, axis=1), np.concatenate(d_b_flat_parts, axis=1)


def reshape_to_layers(flat_w: Array, flat_b: Array, ld: LayerDims,
                      entity_of_row: Array | None = None) -> GeneratedStack:
    """Bijective unflatten: layer-major, then row-major within each matrix."""
    n = flat_w.shape[0]
    if flat_w.shape != (n, ld.flat_weight_dim):
        raise ShapeMismatchError(
            f"flat weights shape {flat_w.shape} does not match expected total "
            f"{ld.flat_weight_dim} for plan {list(ld.dims)}")
    if flat_b.shape != (n, ld.flat_bias_dim):
        raise ShapeMismatchError(
            f"flat biases shape {flat_b.shape} does not match expected total "
            f"{ld.flat_bias_dim} for plan {list(ld.dims)}")
    weights, biases = [], []
    w_off = b_off = 0
    for i in range(ld.n_layers):
        din, dout = ld.dims[i], ld.dims[i + 1]
        weights.append(flat_w[:, w_off:w_off + din * dout].reshape(n, din, dout))
        biases.append(flat_b[:, b_off:b_off + dout])
        w_off += din * dout
        b_off += dout
    return GeneratedStack(ld, weights, biases, entity_of_row)


def flatten_layers(weights: list[Array], biases: list[Array]) -> tuple[Array, Array]:
    """Inverse of reshape_to_layers on the weight/bias lists."""
    n = weights[0].shape[0]
    return (np.concatenate([w.reshape(n, -1) for w in weights], axis=1),
            np.concatenate(biases, axis=1))


class MetaNetwork:
    """Hypernetwork: shared ReLU trunk with two linear heads sized to a stack
    plan (flattened weights and flattened biases).

    The weight head's bias is initialized to a flattened stack of standard
    glorot matrices and the head weights are scaled down, so generated layers
    start at an ordinary dense-network operating point and the conditioning
    input steers deviations around it.
    """

    def __init__(self, name: str, input_dim: int, hidden_dim: int, ld: LayerDims,
                 rng: np.random.Generator, head_scale: float = 0.05):
        self.name = name
        self.layer_dims = ld
        self.trunk = Dense(f"{name}.trunk", input_dim, hidden_dim, "relu", rng)
        self.head_w = Dense(f"{name}.head_w", hidden_dim, ld.flat_weight_dim,
                            "identity", rng, weight_scale=head_scale)
        self.head_b = Dense(f"{name}.head_b", hidden_dim, ld.flat_bias_dim,
                            "identity", rng, weight_scale=head_scale)
        base = [glorot_uniform(rng, ld.dims[i], ld.dims[i + 1])[None]
                for i in range(ld.n_layers)]
        flat_base, _ = flatten_layers(base, [np.zeros((1, d)) for d in ld.dims[1:]])
        self.head_w.b.value[:] = flat_base

    @property
    def input_dim(self) -> int:
        return self.trunk.din

    def forward(self, vecs: Array) -> tuple[Array, Array]:
        if vecs.ndim != 2 or vecs.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"{self.name}: conditioning input shape {vecs.shape} does not match "
                f"expected width {self.input_dim}")
        t = self.trunk.forward(vecs)
        return self.head_w.forward(t), self.head_b.forward(t)

    def backward(self, d_flat_w: Array, d_flat_b: Array) -> Array:
        dt = self.head_w.backward(d_flat_w) + self.head_b.backward(d_flat_b)
        return self.trunk.backward(dt)

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + self.head_w.parameters() + self.head_b.parameters()

    def generate(self, vecs: Array, entity_of_row: Array | None = None) -> GeneratedStack:
        flat_w, flat_b = self.forward(vecs)
        return reshape_to_layers(flat_w, flat_b, self.layer_dims, entity_of_row)


class EPNetGate:
    """Embedding gate baseline: g = 2*sigmoid(MLP(scenario embedding)),
    multiplied elementwise into the backbone input. Zero MLP output means an
    identity transform and the gate is strictly inside (0, 2)."""

    def __init__(self, emb_dim: int, d_e: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Dense("epnet.fc1", emb_dim, hidden, "relu", rng)
        self.fc2 = Dense("epnet.fc2", hidden, d_e, "identity", rng)
        self._cache = None

    def forward(self, dom_emb: Array) -> Array:
        s = self.fc2.forward(self.fc1.forward(dom_emb))
        g = 2.0 * sigmoid(s)
        self._cache = g
        return g

    def backward(self, d_gate: Array) -> Array:
        if self._cache is None:
            raise BackwardStateError("epnet gate: backward() without forward()")
        g, self._cache = self._cache, None
        half = g / 2.0
        ds = d_gate * 2.0 * half * (1.0 - half)
        return self.fc1.backward(self.fc2.backward(ds))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


@dataclass(frozen=True)
class FusionConfig:
    architecture: str = "full"
    baseline: str = "none"
    knowledge_dim: int = 64
    meta_hidden: int = 32
    meta_head_scale: float = 0.05
    k_layers: int = 2
    bottom_hidden: int | None = None
    parallel_hidden: int = 64
    parallel_input: str = "bottom_out"
    epnet_hidden: int = 16
    dyn_hidden: int = 16

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture '{self.architecture}' (expected one of {ARCHITECTURES})")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline '{self.baseline}' (expected one of {BASELINES})")
        if self.parallel_input not in PARALLEL_INPUTS:
            raise ValueError(
                f"parallel_input must be one of {PARALLEL_INPUTS}, got '{self.parallel_input}'")
        if self.k_layers < 1:
            raise ValueError(f"k_layers must be >= 1, got {self.k_layers}")


class FusionModel:
    """Embedding + optional generated bottom stack + backbone + optional
    generated parallel stack, blended by a learnable scalar.

    The prediction is sigmoid(alpha * parallel_logit + (1 - alpha) *
    backbone_logit) when a parallel stack exists, else sigmoid of the
    backbone logit. forward_logits caches every intermediate needed by
    backward; predict_proba is the inference entry point.
    """

    def __init__(self, schema: FeatureSchema, store: VectorStore | None,
                 backbone_cfg: BackboneConfig, fusion_cfg: FusionConfig,
                 rng: np.random.Generator,
                 bottom_dims: LayerDims | None = None,
                 parallel_dims: LayerDims | None = None):
        self.schema = schema
        self.store = store
        self.cfg = fusion_cfg
        self.emb = EmbeddingLayer(schema, rng)
        d_e = self.emb.output_dim
        self.bottom_source, self.parallel_source = _ARCH_WIRING[fusion_cfg.architecture]
        if (self.bottom_source or self.parallel_source) and store is None:
            raise ValueError(
                f"architecture '{fusion_cfg.architecture}' needs a vector store")
        if store is not None and store.dim != fusion_cfg.knowledge_dim:
            raise ShapeMismatchError(
                f"vector store dim {store.dim} != configured knowledge dim "
                f"{fusion_cfg.knowledge_dim}")

        self.bottom_meta = None
        if self.bottom_source is not None:
            dims = bottom_dims or default_bottom_dims(d_e, fusion_cfg.k_layers,
                                                      fusion_cfg.bottom_hidden)
            if dims.dims[0] != d_e or dims.dims[-1] != d_e:
                raise ShapeMismatchError(
                    f"bottom stack must preserve the embedding width {d_e}, "
                    f"got plan {list(dims.dims)}")
            self.bottom_meta = MetaNetwork("meta_bottom", fusion_cfg.knowledge_dim,
                                           fusion_cfg.meta_hidden, dims, rng,
                                           fusion_cfg.meta_head_scale)

        self.parallel_meta = None
        if self.parallel_source is not None:
            dims = parallel_dims or default_parallel_dims(d_e, fusion_cfg.k_layers,
                                                          fusion_cfg.parallel_hidden)
            if dims.dims[0] != d_e or dims.dims[-1] != 1:
                raise ShapeMismatchError(
                    f"parallel stack must map the embedding width {d_e} to one logit, "
                    f"got plan {list(dims.dims)}")
            self.parallel_meta = MetaNetwork("meta_parallel", fusion_cfg.knowledge_dim,
                                             fusion_cfg.meta_hidden, dims, rng,
                                             fusion_cfg.meta_head_scale)

        self.backbone = make_backbone(backbone_cfg, d_e, schema.num_scenarios, rng, self.emb)

        self.epnet = None
        if fusion_cfg.baseline == "epnet":
            self.epnet = EPNetGate(schema.embedding_dim, d_e, fusion_cfg.epnet_hidden, rng)

        self.dyn_meta = None
        if fusion_cfg.baseline == "dynnet":
            body_dim = self.backbone.body_dim
            dyn_dims = LayerDims((body_dim, fusion_cfg.dyn_hidden, 1))
            self.dyn_meta = MetaNetwork("meta_dyn", schema.embedding_dim,
                                        fusion_cfg.meta_hidden, dyn_dims, rng,
                                        fusion_cfg.meta_head_scale)

        self.alpha = Parameter("alpha", np.array([[0.5]]))
        self._cache: dict | None = None

    # -- forward -----------------------------------------------------------

    def forward_logits(self, feats: Array) -> Array:
        cache: dict = {"feats": feats}
        d_ids = feats[:, 0]
        h0 = self.emb.forward(feats)
        cache["h0_shape"] = h0.shape

        x = h0
        if self.bottom_meta is not None:
            vecs, ent = self._conditioning(self.bottom_source, feats)
            stack = self.bottom_meta.generate(vecs, ent)
            x = stack.forward(h0)
            cache["bottom_stack"] = stack
        cache["x"] = x

        xb = x
        if self.epnet is not None:
            dom_emb = self.emb.lookup(0, d_ids)
            gate = self.epnet.forward(dom_emb)
            xb = gate * x
            cache["epnet"] = (gate, x, d_ids)

        if self.dyn_meta is not None:
            body = self.backbone.body_forward(xb, d_ids)
            scen_emb = self.emb.lookup(0, np.arange(self.schema.num_scenarios))
            dyn_stack = self.dyn_meta.generate(scen_emb, entity_of_row=d_ids)
            h_back = dyn_stack.forward(body)
            extra = self.backbone.extra_logit(d_ids)
            if extra is not None:
                h_back = h_back + extra
            cache["dyn"] = (dyn_stack, extra is not None)
        else:
            h_back = self.backbone.forward(xb, d_ids)
        cache["h_back"] = h_back

        if self.parallel_meta is not None:
            vecs, ent = self._conditioning(self.parallel_source, feats)
            stack = self.parallel_meta.generate(vecs, ent)
            par_in = x if self.cfg.parallel_input == "bottom_out" else h0
            h_par = stack.forward(par_in)
            cache["parallel_stack"] = stack
            cache["h_par"] = h_par
            a = self.alpha.value[0, 0]
            logits = a * h_par + (1.0 - a) * h_back
        else:
            logits = h_back
        self._cache = cache
        return logits

    def predict_proba(self, feats: Array) -> Array:
        return sigmoid(self.forward_logits(feats))

    def _conditioning(self, source: str, feats: Array) -> tuple[Array, Array | None]:
        """Knowledge vectors and row->entity mapping for a stack source."""
        if source == "user":
            return self.store.user_matrix(feats[:, 1]), None
        return self.store.scenario_matrix(self.schema.num_scenarios), feats[:, 0]

    # -- backward ----------------------------------------------------------

    def backward(self, d_logits: Array) -> None:
        if self._cache is None:
            raise BackwardStateError("fusion model: backward() without forward_logits()")
        cache, self._cache = self._cache, None
        feats = cache["feats"]
        d_ids = feats[:, 0]
        d_h0 = np.zeros(cache["h0_shape"])
        d_x = np.zeros_like(cache["x"])

        if self.parallel_meta is not None:
            h_par, h_back = cache["h_par"], cache["h_back"]
            a = self.alpha.value[0, 0]
            self.alpha.grad[0, 0] += float(np.sum(d_logits * (h_par - h_back)))
            d_par = a * d_logits
            d_back = (1.0 - a) * d_logits
            d_in, d_fw, d_fb = cache["parallel_stack"].backward(d_par)
            self.parallel_meta.backward(d_fw, d_fb)  # vectors frozen: input grad dropped
            if self.cfg.parallel_input == "bottom_out":
                d_x += d_in
            else:
                d_h0 += d_in
        else:
            d_back = d_logits

        if self.dyn_meta is not None:
            dyn_stack, has_extra = cache["dyn"]
            if has_extra:
                self.backbone.extra_backward(d_back)
            d_body, d_fw, d_fb = dyn_stack.backward(d_back)
            d_scen_emb = self.dyn_meta.backward(d_fw, d_fb)
            self.emb.lookup_backward(0, np.arange(self.schema.num_scenarios), d_scen_emb)
            d_xb = self.backbone.body_backward(d_body)
        else:
            d_xb = self.backbone.backward(d_back)

        if self.epnet is not None:
            gate, x, ids = cache["epnet"]
            d_gate = d_xb * x
            d_x += d_xb * gate
            d_dom = self.epnet.backward(d_gate)
            self.emb.lookup_backward(0, ids, d_dom)
        else:
            d_x += d_xb

        if self.bottom_meta is not None:
            d_h0_b, d_fw, d_fb = cache["bottom_stack"].backward(d_x)
            self.bottom_meta.backward(d_fw, d_fb)  # vectors frozen: input grad dropped
            d_h0 += d_h0_b
        else:
            d_h0 += d_x

        self.emb.backward(feats, d_h0)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = self.emb.parameters()
        if self.bottom_meta is not None:
            params += self.bottom_meta.parameters()
        if self.parallel_meta is not None:
            params += self.parallel_meta.parameters()
        params += self.backbone.parameters()
        if self.epnet is not None:
            params += self.epnet.parameters()
        if self.dyn_meta is not None:
            params += self.dyn_meta.parameters()
        params.append(self.alpha)
        return params

    def parameter_map(self) -> dict[str, Parameter]:
        pmap = {}
        for p in self.parameters():
            if p.name in pmap:
                raise ValueError(f"duplicate parameter name '{p.name}'")
            pmap[p.name] = p
        return pmap

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def snapshot(self) -> dict[str, dict]:
        return {p.name: {"value": p.value.copy(), "m": p.m.copy(), "v": p.v.copy(),
                         "step_count": p.step_count}
                for p in self.parameters()}

    def restore(self, snap: dict[str, dict]) -> None:
        pmap = self.parameter_map()
        if set(snap) != set(pmap):
            missing = set(pmap) ^ set(snap)
            raise ValueError(f"snapshot does not match model parameters: {sorted(missing)[:5]}")
        for name, rec in snap.items():
            p = pmap[name]
            p.value[:] = rec["value"]
            p.m[:] = rec["m"]
            p.v[:] = rec["v"]
            p.step_count = rec["step_count"]
