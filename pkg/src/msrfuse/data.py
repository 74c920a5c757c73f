"""Schema, dataset ingestion, chronological splitting, batching, and a
synthetic multi-scenario generator.

Datasets are immutable after construction: features live in a single int64
array of pre-indexed categorical values (column 0 is the scenario indicator,
column 1 the user id), so they are safe to share read-only across threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gradcore import new_rng, sigmoid
from .knowledge import VectorStore

Array = np.ndarray

RESERVED_FIELDS = ("domain", "user")


class DataFormatError(ValueError):
    """Malformed dataset/schema input; message carries file and line."""


class SplitError(ValueError):
    """A requested split would be empty or the ratios are inconsistent."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    cardinality: int


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered categorical fields plus scenario count and embedding width.

    The first two fields are always the reserved names "domain" (cardinality
    equal to the number of scenarios) and "user".
    """

    fields: tuple[FieldSpec, ...]
    num_scenarios: int
    embedding_dim: int

    def __post_init__(self):
        if self.num_scenarios < 2:
            raise DataFormatError(f"num_scenarios must be >= 2, got {self.num_scenarios}")
        if self.embedding_dim < 1:
            raise DataFormatError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if len(self.fields) < 2:
            raise DataFormatError("schema needs at least the reserved fields 'domain' and 'user'")
        for i, f in enumerate(self.fields):
            if f.cardinality < 1:
                raise DataFormatError(f"field '{f.name}' has cardinality {f.cardinality} < 1")
            if i < 2 and f.name != RESERVED_FIELDS[i]:
                raise DataFormatError(
                    f"field {i} must be named '{RESERVED_FIELDS[i]}', got '{f.name}'")
        if self.fields[0].cardinality != self.num_scenarios:
            raise DataFormatError(
                f"'domain' cardinality {self.fields[0].cardinality} "
                f"!= num_scenarios {self.num_scenarios}")

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def num_users(self) -> int:
        return self.fields[1].cardinality

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.fields)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def to_dict(self) -> dict:
        return {
            "fields": [{"name": f.name, "cardinality": f.cardinality} for f in self.fields],
            "num_scenarios": self.num_scenarios,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            fields = tuple(FieldSpec(f["name"], int(f["cardinality"])) for f in d["fields"])
            return cls(fields, int(d["num_scenarios"]), int(d["embedding_dim"]))
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"bad schema object: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc


@dataclass(frozen=True)
class Sample:
    """One interaction record: scenario, user, full feature-index row, label."""

    domain_id: int
    user_id: int
    feature_indices: tuple[int, ...]
    label: int
    order_key: int


class Dataset:
    """Immutable table of samples validated against a schema."""

    def __init__(self, schema: FeatureSchema, features: Array, labels: Array, order: Array):
        features = np.asarray(features, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        order = np.asarray(order, dtype=np.int64)
        n = features.shape[0]
        if features.ndim != 2 or features.shape[1] != schema.num_fields:
            raise DataFormatError(
                f"features shape {features.shape} does not match schema with "
                f"{schema.num_fields} fields")
        if labels.shape != (n,) or order.shape != (n,):
            raise DataFormatError("labels/order length does not match features")
        self.schema = schema
        self.features = features
        self.labels = labels
        self.order = order
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        self.order.setflags(write=False)
        self._user_rows: dict[int, Array] | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def domain_ids(self) -> Array:
        return self.features[:, 0]

    @property
    def user_ids(self) -> Array:
        return self.features[:, 1]

    def scenario_counts(self) -> Array:
        return np.bincount(self.domain_ids, minlength=self.schema.num_scenarios)

    def sample(self, i: int) -> Sample:
        row = self.features[i]
        return Sample(int(row[0]), int(row[1]), tuple(int(v) for v in row),
                      int(self.labels[i]), int(self.order[i]))

    def subset(self, idx: Array) -> "Dataset":
        return Dataset(self.schema, self.features[idx], self.labels[idx], self.order[idx])

    def user_rows(self, user_id: int) -> Array:
        """Row indices of one user, grouped once and cached."""
        if self._user_rows is None:
            groups: dict[int, list[int]] = {}
            for i, u in enumerate(self.user_ids):
                groups.setdefault(int(u), []).append(i)
            self._user_rows = {u: np.asarray(rows, dtype=np.int64) for u, rows in groups.items()}
        return self._user_rows.get(int(user_id), np.empty(0, dtype=np.int64))


def load_csv(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Read the dataset CSV contract: header ``domain,user,<field...>,label,order``,
    all values base-10 non-negative integers, indices 0-based within each
    field's cardinality.
    """
    path = Path(path)
    expected_header = list(schema.field_names) + ["label", "order"]
    features: list[list[int]] = []
    labels: list[int] = []
    order: list[int] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}:1: empty file") from None
        if header != expected_header:
            raise DataFormatError(
                f"{path}:1: header {header} does not match schema columns {expected_header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(expected_header)} columns, got {len(row)}")
            try:
                values = [int(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer value: {exc}") from exc
            feats = values[:schema.num_fields]
            label, order_key = values[schema.num_fields], values[schema.num_fields + 1]
            for m, (v, card) in enumerate(zip(feats, schema.cardinalities)):
                if not 0 <= v < card:
                    raise DataFormatError(
                        f"{path}:{lineno}: field '{schema.field_names[m]}' index {v} "
                        f"out of range [0, {card})")
            if label not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if order_key < 0:
                raise DataFormatError(f"{path}:{lineno}: order must be >= 0, got {order_key}")
            features.append(feats)
            labels.append(label)
            order.append(order_key)
    if not features:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(schema,
                   np.asarray(features, dtype=np.int64),
                   np.asarray(labels, dtype=np.int64),
                   np.asarray(order, dtype=np.int64))


def save_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ds.schema.field_names) + ["label", "order"])
        for i in range(len(ds)):
            writer.writerow([int(v) for v in ds.features[i]] +
                            [int(ds.labels[i]), int(ds.order[i])])


def split_chrono(ds: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
                 ) -> tuple[Dataset, Dataset, Dataset]:
    """Split by order_key rank over the whole dataset; ties keep file order.

    Boundaries are ``floor(N * r0)`` and ``floor(N * (r0 + r1))``.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios {ratios} do not sum to 1")
    n = len(ds)
    rank = np.argsort(ds.order, kind="stable")
    n_train = int(np.floor(n * ratios[0]))
    n_train_valid = int(np.floor(n * (ratios[0] + ratios[1])))
    parts = (rank[:n_train], rank[n_train:n_train_valid], rank[n_train_valid:])
    for name, idx in zip(("train", "valid", "test"), parts):
        if idx.size == 0:
            raise SplitError(f"{name} split is empty for N={n}, ratios={ratios}")
    return tuple(ds.subset(idx) for idx in parts)  # type: ignore[return-value]


def make_batches(ds: Dataset, batch_size: int, rng: np.random.Generator) -> list[Array]:
    """One epoch of mini-batch row indices: a full shuffle, scenarios mixed,
    final short batch kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.permutation(len(ds))
    return [perm[i:i + batch_size] for i in range(0, len(ds), batch_size)]


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic multi-scenario generator.

    Users carry latent preference vectors, scenarios expose overlapping
    coordinate masks of that latent space (half the coordinates are shared by
    every scenario, the rest are split per scenario), and clicks are Bernoulli
    in sigmoid(<z_u * m_d, q_i> + b_d).
    """

    num_scenarios: int = 2
    num_users: int = 500
    items_per_scenario: int = 200
    extra_fields: int = 1
    latent_dim: int = 8
    samples_per_scenario: int = 20000
    noise_std: float = 0.1
    informative: bool = True
    knowledge_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_scenarios, self.num_users, self.items_per_scenario,
                  self.extra_fields, self.latent_dim, self.samples_per_scenario,
                  self.knowledge_dim)
        if any(c < 1 for c in counts):
            raise ValueError(f"all synthetic counts must be >= 1, got {self}")
        if self.num_scenarios < 2:
            raise ValueError("need at least 2 scenarios")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class GroundTruth:
    """True click probabilities aligned row-wise with the generated dataset."""

    probs: Array

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("p\n")
            for p in self.probs:
                fh.write(f"{p:.17g}\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "p":
            raise DataFormatError(f"{path}:1: expected header 'p'")
        return cls(np.asarray([float(v) for v in lines[1:]], dtype=np.float64))


# Cardinality of pure-noise extra fields beyond the item field.
_NOISE_FIELD_CARDINALITY = 10
# Share of a user's interactions that land in their home scenario; the rest
# spread uniformly over the other scenarios, which leaves the cross-scenario
# half of each latent vector under-observed in the data itself.
_HOME_SCENARIO_SHARE = 0.8


def scenario_masks(num_scenarios: int, latent_dim: int) -> Array:
    """0/1 masks over latent coordinates: the first half is shared by all
    scenarios, the remaining coordinates are split evenly per scenario."""
    shared = latent_dim // 2
    masks = np.zeros((num_scenarios, latent_dim))
    masks[:, :shared] = 1.0
    rest = latent_dim - shared
    bounds = np.linspace(0, rest, num_scenarios + 1).astype(int)
    for d in range(num_scenarios):
        masks[d, shared + bounds[d]:shared + bounds[d + 1]] = 1.0
    return masks


def synth_generate(cfg: SyntheticConfig, embedding_dim: int = 8
                   ) -> tuple[Dataset, VectorStore, GroundTruth]:
    """Draw a multi-scenario interaction dataset plus knowledge vectors.

    Users are assigned a home scenario (round robin) that receives most of
    their traffic. Knowledge vectors are fixed random linear images of the
    user latents / scenario descriptors when ``informative``, otherwise pure
    noise of matching shape. Equal configs give bit-identical outputs.
    """
    rng = new_rng(cfg.seed, stream=2)
    d_count, users, items, k = (cfg.num_scenarios, cfg.num_users,
                                cfg.items_per_scenario, cfg.latent_dim)

    z = rng.normal(size=(users, k))
    masks = scenario_masks(d_count, k)
    q = rng.normal(size=(d_count, items, k))
    bias = rng.normal(size=d_count) * 0.5
    home = np.arange(users) % d_count

    feats_parts, label_parts, prob_parts = [], [], []
    for d in range(d_count):
        n = cfg.samples_per_scenario
        # user draw biased toward home-scenario users
        weights = np.where(home == d, _HOME_SCENARIO_SHARE / max((home == d).sum(), 1),
                           (1.0 - _HOME_SCENARIO_SHARE) / max((home != d).sum(), 1))
        weights = weights / weights.sum()
        u_draw = rng.choice(users, size=n, p=weights)
        i_draw = rng.integers(0, items, size=n)
        logits = np.einsum("nk,nk->n", z[u_draw] * masks[d], q[d, i_draw]) + bias[d]
        p = sigmoid(logits)
        y = (rng.random(n) < p).astype(np.int64)
        cols = [np.full(n, d, dtype=np.int64), u_draw.astype(np.int64), i_draw.astype(np.int64)]
        for _ in range(cfg.extra_fields - 1):
            cols.append(rng.integers(0, _NOISE_FIELD_CARDINALITY, size=n))
        feats_parts.append(np.column_stack(cols))
        label_parts.append(y)
        prob_parts.append(p)

    features = np.concatenate(feats_parts, axis=0)
    labels = np.concatenate(label_parts)
    probs = np.concatenate(prob_parts)
    perm = rng.permutation(features.shape[0])
    features, labels, probs = features[perm], labels[perm], probs[perm]
    order = np.arange(features.shape[0], dtype=np.int64)

    fields = [FieldSpec("domain", d_count), FieldSpec("user", users), FieldSpec("item", items)]
    for j in range(cfg.extra_fields - 1):
        fields.append(FieldSpec(f"extra_{j}", _NOISE_FIELD_CARDINALITY))
    schema = FeatureSchema(tuple(fields), d_count, embedding_dim)
    ds = Dataset(schema, features, labels, order)

    h = cfg.knowledge_dim
    vectors: dict[tuple[str, int], Array] = {}
    if cfg.informative:
        user_map = rng.normal(size=(k, h)) / np.sqrt(k)
        user_vecs = z @ user_map
        if cfg.noise_std > 0:
            user_vecs = user_vecs + cfg.noise_std * rng.normal(size=user_vecs.shape)
        counts = np.bincount(features[:, 0], minlength=d_count).astype(np.float64)
        pos_rate = np.array([labels[features[:, 0] == d].mean() for d in range(d_count)])
        scen_feats = np.column_stack([masks, bias[:, None],
                                      (counts / counts.sum())[:, None], pos_rate[:, None]])
        scen_map = rng.normal(size=(scen_feats.shape[1], h)) / np.sqrt(scen_feats.shape[1])
        scen_vecs = scen_feats @ scen_map
        if cfg.noise_std > 0:
            scen_vecs = scen_vecs + cfg.noise_std * rng.normal(size=scen_vecs.shape)
    else:
        user_vecs = rng.normal(size=(users, h))
        scen_vecs = rng.normal(size=(d_count, h))
    for u in range(users):
        vectors[("user", u)] = user_vecs[u].copy()
    for d in range(d_count):
        vectors[("scenario", d)] = scen_vecs[d].copy()
    store = VectorStore(h, vectors, fallback_policy="error")
    return ds, store, GroundTruth(probs)
