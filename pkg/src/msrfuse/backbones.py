"""The five multi-scenario backbone architectures.

Every backbone maps a transformed embedding row to one scalar logit per
sample and splits into a shared body plus a scenario head, so a hypernetwork
baseline can swap the head out. Scenario-specific parameters only ever see
(and only ever get gradients from) their own scenario's rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureSchema
from .gradcore import (Array, BackwardStateError, Dense, MLP, Parameter,
                       ShapeMismatchError, glorot_uniform)

BACKBONE_KINDS = ("shared_bottom", "omoe", "mmoe", "ple", "star")


class RoutingError(ValueError):
    """A sample carries a scenario id outside [0, D)."""


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "star"
    tower_dims: tuple[int, ...] = (256, 128, 64)
    num_experts: int = 4
    expert_dims: tuple[int, ...] = (64,)
    ple_shared_experts: int = 2
    ple_scenario_experts: int = 1
    aux_hidden: int = 16

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone '{self.kind}' (expected one of {BACKBONE_KINDS})")


def _scenario_groups(domain_ids: Array, num_scenarios: int) -> list[tuple[int, Array]]:
    """(scenario, row indices) for scenarios present, in fixed scenario order."""
    ids = np.asarray(domain_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= num_scenarios):
        bad = ids[(ids < 0) | (ids >= num_scenarios)][0]
        raise RoutingError(f"scenario id {int(bad)} out of range [0, {num_scenarios})")
    return [(d, np.flatnonzero(ids == d)) for d in range(num_scenarios)
            if (ids == d).any()]


class EmbeddingLayer:
    """One table per field; forward concatenates looked-up rows.

    backward takes the batch features again and scatter-adds the gradient
    slices into exactly the touched table rows.
    """

    def __init__(self, schema: FeatureSchema, rng: np.random.Generator):
        self.schema = schema
        dim = schema.embedding_dim
        self.tables = [Parameter(f"emb.{f.name}", glorot_uniform(rng, f.cardinality, dim))
                       for f in schema.fields]

    @property
    def output_dim(self) -> int:
        return self.schema.num_fields * self.schema.embedding_dim

    def forward(self, feats: Array) -> Array:
        dim = self.schema.embedding_dim
        cols = []
        for m, table in enumerate(self.tables):
            idx = feats[:, m]
            if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
                bad = idx[(idx < 0) | (idx >= table.shape[0])][0]
                raise ShapeMismatchError(
                    f"field '{self.schema.field_names[m]}': index {int(bad)} out of range "
                    f"[0, {table.shape[0]})")
            cols.append(table.value[idx])
        return np.concatenate(cols, axis=1)

    def backward(self, feats: Array, d_h0: Array) -> None:
        dim = self.schema.embedding_dim
        for m, table in enumerate(self.tables):
            np.add.at(table.grad, feats[:, m], d_h0[:, m * dim:(m + 1) * dim])

    def lookup(self, field: int, ids: Array) -> Array:
        return self.tables[field].value[np.asarray(ids, dtype=np.int64)]

    def lookup_backward(self, field: int, ids: Array, d_rows: Array) -> None:
        np.add.at(self.tables[field].grad, np.asarray(ids, dtype=np.int64), d_rows)

    def parameters(self) -> list[Parameter]:
        return list(self.tables)


class ScenarioTowers:
    """One MLP tower per scenario; rows are routed by their scenario id."""

    def __init__(self, name: str, din: int, tower_dims: tuple[int, ...],
                 num_scenarios: int, rng: np.random.Generator):
        self.num_scenarios = num_scenarios
        self.towers = [MLP(f"{name}.tower{d}", (din, *tower_dims, 1), rng)
                       for d in range(num_scenarios)]
        self._groups: list[tuple[int, Array]] | None = None
        self._batch = 0

    def forward(self, x: Array, domain_ids: Array) -> Array:
        self._groups = _scenario_groups(domain_ids, self.num_scenarios)
        self._batch = x.shape[0]
        out = np.zeros((x.shape[0], 1))
        for d, idx in self._groups:
            out[idx] = self.towers[d].forward(x[idx])
        return out

    def backward(self, dy: Array) -> Array:
        if self._groups is None:
            raise BackwardStateError("ScenarioTowers: backward() without forward()")
        groups, self._groups = self._groups, None
        dx = None
        for d, idx in groups:
            part = self.towers[d].backward(dy[idx])
            if dx is None:
                dx = np.zeros((self._batch, part.shape[1]))
            dx[idx] = part
        return dx

    def parameters(self) -> list[Parameter]:
        return [p for t in self.towers for p in t.parameters()]


class _ExpertMix:
    """Experts plus softmax gates; covers one-gate (OMoE), per-scenario gates
    (MMoE) and shared+specific experts with per-scenario gates (PLE/CGC)."""

    def __init__(self, name: str, din: int, cfg: BackboneConfig, num_scenarios: int,
                 rng: np.random.Generator, gating: str):
        self.gating = gating  # "single" | "per_scenario" | "cgc"
        self.num_scenarios = num_scenarios
        dims = (din, *cfg.expert_dims)
        if gating == "cgc":
            self.shared_experts = [MLP(f"{name}.shared{j}", dims, rng, final_activation="relu")
                                   for j in range(cfg.ple_shared_experts)]
            self.scenario_experts = [
                [MLP(f"{name}.scen{d}_{j}", dims, rng, final_activation="relu")
                 for j in range(cfg.ple_scenario_experts)]
                for d in range(num_scenarios)]
            n_gate = cfg.ple_shared_experts + cfg.ple_scenario_experts
        else:
            self.experts = [MLP(f"{name}.expert{j}", dims, rng, final_activation="relu")
                            for j in range(cfg.num_experts)]
            n_gate = cfg.num_experts
        if gating == "single":
            self.gates = [Dense(f"{name}.gate", din, n_gate, "softmax", rng)]
        else:
            self.gates = [Dense(f"{name}.gate{d}", din, n_gate, "softmax", rng)
                          for d in range(num_scenarios)]
        self.out_dim = dims[-1]
        self._cache = None

    def forward(self, x: Array, domain_ids: Array) -> Array:
        b = x.shape[0]
        if self.gating == "single":
            expert_out = np.stack([e.forward(x) for e in self.experts])  # [n, B, F]
            g = self.gates[0].forward(x)  # [B, n]
            out = np.einsum("nbf,bn->bf", expert_out, g)
            self._cache = ("single", x.shape, expert_out, g)
            return out
        if self.gating == "per_scenario":
            expert_out = np.stack([e.forward(x) for e in self.experts])
            groups = _scenario_groups(domain_ids, self.num_scenarios)
            out = np.zeros((b, self.out_dim))
            gates_by_group = []
            for d, idx in groups:
                g = self.gates[d].forward(x[idx])
                out[idx] = np.einsum("nbf,bn->bf", expert_out[:, idx, :], g)
                gates_by_group.append(g)
            self._cache = ("per_scenario", x.shape, expert_out, groups, gates_by_group)
            return out
        # cgc: shared experts see the full batch, specific experts only their rows
        shared_out = np.stack([e.forward(x) for e in self.shared_experts])  # [ns, B, F]
        groups = _scenario_groups(domain_ids, self.num_scenarios)
        out = np.zeros((b, self.out_dim))
        per_group = []
        for d, idx in groups:
            spec_out = np.stack([e.forward(x[idx]) for e in self.scenario_experts[d]])
            cols = np.concatenate([shared_out[:, idx, :], spec_out])  # [ns+nd, |idx|, F]
            g = self.gates[d].forward(x[idx])
            out[idx] = np.einsum("nbf,bn->bf", cols, g)
            per_group.append((cols, g))
        self._cache = ("cgc", x.shape, shared_out, groups, per_group)
        return out

    def backward(self, dy: Array) -> Array:
        if self._cache is None:
            raise BackwardStateError("_ExpertMix: backward() without forward()")
        cache, self._cache = self._cache, None
        kind = cache[0]
        if kind == "single":
            _, x_shape, expert_out, g = cache
            dx = np.zeros(x_shape)
            d_g = np.einsum("bf,nbf->bn", dy, expert_out)
            dx += self.gates[0].backward(d_g)
            for j, e in enumerate(self.experts):
                dx += e.backward(g[:, j:j + 1] * dy)
            return dx
        if kind == "per_scenario":
            _, x_shape, expert_out, groups, gates_by_group = cache
            dx = np.zeros(x_shape)
            d_expert = np.zeros_like(expert_out)
            for (d, idx), g in zip(groups, gates_by_group):
                d_g = np.einsum("bf,nbf->bn", dy[idx], expert_out[:, idx, :])
                dx[idx] += self.gates[d].backward(d_g)
                d_expert[:, idx, :] += g.T[:, :, None] * dy[idx][None, :, :]
            for j, e in enumerate(self.experts):
                dx += e.backward(d_expert[j])
            return dx
        _, x_shape, shared_out, groups, per_group = cache
        ns = len(self.shared_experts)
        dx = np.zeros(x_shape)
        d_shared = np.zeros_like(shared_out)
        for (d, idx), (cols, g) in zip(groups, per_group):
            d_g = np.einsum("bf,nbf->bn", dy[idx], cols)
            dx[idx] += self.gates[d].backward(d_g)
            d_cols = g.T[:, :, None] * dy[idx][None, :, :]
            d_shared[:, idx, :] += d_cols[:ns]
            for j, e in enumerate(self.scenario_experts[d]):
                dx[idx] += e.backward(d_cols[ns + j])
        for j, e in enumerate(self.shared_experts):
            dx += e.backward(d_shared[j])
        return dx

    def parameters(self) -> list[Parameter]:
        params = []
        if self.gating == "cgc":
            for e in self.shared_experts:
                params += e.parameters()
            for group in self.scenario_experts:
                for e in group:
                    params += e.parameters()
        else:
            for e in self.experts:
                params += e.parameters()
        for gate in self.gates:
            params += gate.parameters()
        return params


class StarLayer:
    """Dense layer with multiplicative scenario specialization:
    ``W_eff = W_shared * W_d`` and ``b_eff = b_shared + b_d``.

    Scenario weights start at ones and scenario biases at zeros, so the layer
    initially equals the pure shared network.
    """

    def __init__(self, name: str, din: int, dout: int, num_scenarios: int,
                 activation: str, rng: np.random.Generator):
        self.name = name
        self.activation = activation
        self.num_scenarios = num_scenarios
        self.w_shared = Parameter(f"{name}.w_shared", glorot_uniform(rng, din, dout))
        self.b_shared = Parameter(f"{name}.b_shared", np.zeros((1, dout)))
        self.w_domain = [Parameter(f"{name}.w_dom{d}", np.ones((din, dout)))
                         for d in range(num_scenarios)]
        self.b_domain = [Parameter(f"{name}.b_dom{d}", np.zeros((1, dout)))
                         for d in range(num_scenarios)]
        self._cache = None

    def forward(self, x: Array, domain_ids: Array) -> Array:
        groups = _scenario_groups(domain_ids, self.num_scenarios)
        out = np.zeros((x.shape[0], self.w_shared.shape[1]))
        saved = []
        for d, idx in groups:
            w_eff = self.w_shared.value * self.w_domain[d].value
            z = x[idx] @ w_eff + (self.b_shared.value + self.b_domain[d].value)
            y = np.maximum(z, 0.0) if self.activation == "relu" else z
            out[idx] = y
            saved.append((d, idx, x[idx], z, w_eff))
        self._cache = (x.shape, saved)
        return out

    def backward(self, dy: Array) -> Array:
        if self._cache is None:
            raise BackwardStateError(f"{self.name}: backward() without forward()")
        (x_shape, saved), self._cache = self._cache, None
        dx = np.zeros(x_shape)
        for d, idx, x_g, z, w_eff in saved:
            dz = dy[idx] * (z > 0.0) if self.activation == "relu" else dy[idx]
            dw_eff = x_g.T @ dz
            self.w_shared.grad += dw_eff * self.w_domain[d].value
            self.w_domain[d].grad += dw_eff * self.w_shared.value
            db = dz.sum(axis=0, keepdims=True)
            self.b_shared.grad += db
            self.b_domain[d].grad += db
            dx[idx] = dz @ w_eff.T
        return dx

    def parameters(self) -> list[Parameter]:
        return [self.w_shared, self.b_shared, *self.w_domain, *self.b_domain]


class Backbone:
    """Interface: forward/backward over (h0, domain ids), plus a body/head
    split so a generated tower can replace the head."""

    kind: str

    def body_forward(self, h0: Array, domain_ids: Array) -> Array:
        raise NotImplementedError

    def body_backward(self, d_feats: Array) -> Array:
        raise NotImplementedError

    def head_forward(self, feats: Array, domain_ids: Array) -> Array:
        raise NotImplementedError

    def head_backward(self, d_logit: Array) -> Array:
        raise NotImplementedError

    def extra_logit(self, domain_ids: Array) -> Array | None:
        return None

    def extra_backward(self, d_logit: Array) -> None:
        pass

    @property
    def body_dim(self) -> int:
        raise NotImplementedError

    def forward(self, h0: Array, domain_ids: Array) -> Array:
        feats = self.body_forward(h0, domain_ids)
        logit = self.head_forward(feats, domain_ids)
        extra = self.extra_logit(domain_ids)
        return logit if extra is None else logit + extra

    def backward(self, d_logit: Array) -> Array:
        self.extra_backward(d_logit)
        d_feats = self.head_backward(d_logit)
        return self.body_backward(d_feats)

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError


class SharedBottomBackbone(Backbone):
    kind = "shared_bottom"

    def __init__(self, d_e: int, num_scenarios: int, cfg: BackboneConfig,
                 rng: np.random.Generator):
        self._d_e = d_e
        self.towers = ScenarioTowers("shared_bottom", d_e, cfg.tower_dims,
                                     num_scenarios, rng)

    @property
    def body_dim(self) -> int:
        return self._d_e

    def body_forward(self, h0, domain_ids):
        return h0

    def body_backward(self, d_feats):
        return d_feats

    def head_forward(self, feats, domain_ids):
        return self.towers.forward(feats, domain_ids)

    def head_backward(self, d_logit):
        return self.towers.backward(d_logit)

    def parameters(self):
        return self.towers.parameters()


class MoEBackbone(Backbone):
    """OMoE (one gate), MMoE (a gate per scenario) and PLE/CGC (shared plus
    scenario-specific experts) share the mix-then-tower layout."""

    def __init__(self, kind: str, d_e: int, num_scenarios: int, cfg: BackboneConfig,
                 rng: np.random.Generator):
        gating = {"omoe": "single", "mmoe": "per_scenario", "ple": "cgc"}[kind]
        self.kind = kind
        self.mix = _ExpertMix(kind, d_e, cfg, num_scenarios, rng, gating)
        self.towers = ScenarioTowers(kind, self.mix.out_dim, cfg.tower_dims,
                                     num_scenarios, rng)

    @property
    def body_dim(self) -> int:
        return self.mix.out_dim

    def body_forward(self, h0, domain_ids):
        return self.mix.forward(h0, domain_ids)

    def body_backward(self, d_feats):
        return self.mix.backward(d_feats)

    def head_forward(self, feats, domain_ids):
        return self.towers.forward(feats, domain_ids)

    def head_backward(self, d_logit):
        return self.towers.backward(d_logit)

    def parameters(self):
        return self.mix.parameters() + self.towers.parameters()


class StarBackbone(Backbone):
    """Star-topology stack (shared weights elementwise-scaled per scenario)
    plus an auxiliary MLP on the scenario's own embedding whose logit is
    added to the main one."""

    kind = "star"

    def __init__(self, d_e: int, num_scenarios: int, cfg: BackboneConfig,
                 rng: np.random.Generator, emb: EmbeddingLayer):
        dims = (d_e, *cfg.tower_dims)
        self.layers = [StarLayer(f"star.{i}", dims[i], dims[i + 1], num_scenarios,
                                 "relu", rng)
                       for i in range(len(dims) - 1)]
        self.final = StarLayer("star.final", dims[-1], 1, num_scenarios, "identity", rng)
        self.aux = MLP("star.aux", (emb.schema.embedding_dim, cfg.aux_hidden, 1), rng)
        self.emb = emb
        self._aux_ids: Array | None = None

    @property
    def body_dim(self) -> int:
        return self.final.w_shared.shape[0]

    def body_forward(self, h0, domain_ids):
        x = h0
        for layer in self.layers:
            x = layer.forward(x, domain_ids)
        return x

    def body_backward(self, d_feats):
        for layer in reversed(self.layers):
            d_feats = layer.backward(d_feats)
        return d_feats

    def head_forward(self, feats, domain_ids):
        return self.final.forward(feats, domain_ids)

    def head_backward(self, d_logit):
        return self.final.backward(d_logit)

    def extra_logit(self, domain_ids):
        self._aux_ids = np.asarray(domain_ids, dtype=np.int64)
        dom_emb = self.emb.lookup(0, self._aux_ids)
        return self.aux.forward(dom_emb)

    def extra_backward(self, d_logit):
        if self._aux_ids is None:
            raise BackwardStateError("star.aux: backward() without forward()")
        ids, self._aux_ids = self._aux_ids, None
        d_dom = self.aux.backward(d_logit)
        self.emb.lookup_backward(0, ids, d_dom)

    def parameters(self):
        params = []
        for layer in self.layers:
            params += layer.parameters()
        params += self.final.parameters()
        params += self.aux.parameters()
        return params


def make_backbone(cfg: BackboneConfig, d_e: int, num_scenarios: int,
                  rng: np.random.Generator, emb: EmbeddingLayer) -> Backbone:
    if cfg.kind == "shared_bottom":
        return SharedBottomBackbone(d_e, num_scenarios, cfg, rng)
    if cfg.kind in ("omoe", "mmoe", "ple"):
        return MoEBackbone(cfg.kind, d_e, num_scenarios, cfg, rng)
    if cfg.kind == "star":
        return StarBackbone(d_e, num_scenarios, cfg, rng, emb)
    raise ValueError(f"unknown backbone '{cfg.kind}'")
