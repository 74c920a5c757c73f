"""Prompt construction and the knowledge-vector store.

The language model itself is an external producer: this module emits the
scenario- and user-level prompts it should answer (JSONL), and stores the
H-dimensional vectors (one per scenario, one per user) that its last hidden
states provide. Training never touches the producer again; the store is
immutable after load and safe to read concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset

Array = np.ndarray

SCOPES = ("scenario", "user")
NO_HISTORY_MARK = "[no-history]"

_COUNT_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven",
                8: "eight", 9: "nine", 10: "ten"}


class PromptError(ValueError):
    """Prompt construction failed (missing descriptions, bad indices)."""


class StoreFormatError(ValueError):
    """Malformed vector-store file; message carries file and line."""


class VectorMissError(KeyError):
    """Vector lookup failed under fallback policy 'error'."""


def _count_word(n: int) -> str:
    return _COUNT_WORDS.get(n, str(n))


@dataclass(frozen=True)
class ScenarioStats:
    """Platform-level statistics that seed the scenario prompts.

    Per-scenario interaction/user/item counts plus the overlap counts across
    scenarios (overlaps are read as present-in-all-scenarios, so totals are
    ``sum - overlap * (D - 1)``).
    """

    platform_name: str
    platform_description: str
    scenario_names: tuple[str, ...]
    interactions: tuple[int, ...]
    users: tuple[int, ...]
    items: tuple[int, ...]
    overlapped_users: int
    overlapped_items: int
    user_description: str = ""
    item_description: str = ""
    scenario_notes: tuple[str, ...] = ()

    def __post_init__(self):
        d = len(self.scenario_names)
        if d < 2:
            raise PromptError("need at least 2 scenarios")
        for name, values in (("interactions", self.interactions), ("users", self.users),
                             ("items", self.items)):
            if len(values) != d:
                raise PromptError(f"{name} has {len(values)} entries for {d} scenarios")
        if self.overlapped_users > min(self.users):
            raise PromptError(
                f"overlapped_users {self.overlapped_users} exceeds min per-scenario users "
                f"{min(self.users)}")
        if self.overlapped_items > min(self.items):
            raise PromptError(
                f"overlapped_items {self.overlapped_items} exceeds min per-scenario items "
                f"{min(self.items)}")
        if self.scenario_notes and len(self.scenario_notes) != d:
            raise PromptError("scenario_notes must be empty or one note per scenario")

    @property
    def num_scenarios(self) -> int:
        return len(self.scenario_names)

    @property
    def total_users(self) -> int:
        return sum(self.users) - self.overlapped_users * (self.num_scenarios - 1)

    @property
    def total_items(self) -> int:
        return sum(self.items) - self.overlapped_items * (self.num_scenarios - 1)

    def to_dict(self) -> dict:
        return {
            "platform_name": self.platform_name,
            "platform_description": self.platform_description,
            "scenario_names": list(self.scenario_names),
            "interactions": list(self.interactions),
            "users": list(self.users),
            "items": list(self.items),
            "overlapped_users": self.overlapped_users,
            "overlapped_items": self.overlapped_items,
            "user_description": self.user_description,
            "item_description": self.item_description,
            "scenario_notes": list(self.scenario_notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioStats":
        try:
            return cls(
                platform_name=d["platform_name"],
                platform_description=d["platform_description"],
                scenario_names=tuple(d["scenario_names"]),
                interactions=tuple(int(v) for v in d["interactions"]),
                users=tuple(int(v) for v in d["users"]),
                items=tuple(int(v) for v in d["items"]),
                overlapped_users=int(d["overlapped_users"]),
                overlapped_items=int(d["overlapped_items"]),
                user_description=d.get("user_description", ""),
                item_description=d.get("item_description", ""),
                scenario_notes=tuple(d.get("scenario_notes", ())),
            )
        except KeyError as exc:
            raise PromptError(f"stats object is missing key {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PromptRecord:
    scope: str
    id: int
    text: str

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise PromptError(f"scope must be one of {SCOPES}, got '{self.scope}'")
        if not self.text:
            raise PromptError("prompt text must be non-empty")


def build_scenario_prompt(stats: ScenarioStats, d: int) -> PromptRecord:
    """Scenario-level prompt for scenario d.

    One prompt per scenario: the statistics and the commonality clause are
    identical across scenarios, only the final distinction clause names
    scenario d.
    """
    if not 0 <= d < stats.num_scenarios:
        raise PromptError(f"scenario index {d} out of range [0, {stats.num_scenarios})")
    if not stats.platform_description:
        raise PromptError("platform_description is required for scenario prompts")
    per_scenario = ", ".join(
        f"{n} interactions in the {name} scenario"
        for n, name in zip(stats.interactions, stats.scenario_names))
    user_desc = f" {stats.user_description}" if stats.user_description else ""
    item_desc = f" {stats.item_description}" if stats.item_description else ""
    note = f" {stats.scenario_notes[d]}" if stats.scenario_notes else ""
    text = (
        f"On platform {stats.platform_name}, {stats.platform_description}, "
        f"suppose there are {per_scenario}. Besides, in these scenarios there are "
        f"{stats.total_users} users{user_desc} and {stats.total_items} items{item_desc} "
        f"where {stats.overlapped_users} users and {stats.overlapped_items} products are "
        f"overlapped.{note} From the relationship among these scenarios and statistics "
        f"given, explicitly summarize the scenario commonality among the "
        f"{_count_word(stats.num_scenarios)} scenarios and the distinction of the "
        f"{stats.scenario_names[d]} scenario."
    )
    return PromptRecord("scenario", d, text)


def _render_interaction(ds: "Dataset", row: int) -> str:
    parts = [f"{name} {int(v)}" for name, v in
             zip(ds.schema.field_names[2:], ds.features[row, 2:])]
    return ", ".join(parts) if parts else "an item"


def build_user_prompt(ds: "Dataset", u: int, recent_limit: int,
                      scenario_names: tuple[str, ...] | None = None,
                      platform_name: str = "the platform") -> PromptRecord:
    """User-level prompt from the user's positive interactions only.

    Per scenario, at most ``recent_limit`` most recent positives (by order
    key) are rendered oldest to newest. Users without any positive
    interaction get a minimal prompt flagged with ``[no-history]``.
    """
    if recent_limit < 1:
        raise PromptError(f"recent_limit must be >= 1, got {recent_limit}")
    d_count = ds.schema.num_scenarios
    if scenario_names is None:
        scenario_names = tuple(f"scenario_{d}" for d in range(d_count))
    if len(scenario_names) != d_count:
        raise PromptError(f"{len(scenario_names)} scenario names for {d_count} scenarios")

    rows = ds.user_rows(u)
    pos = rows[ds.labels[rows] == 1]
    if pos.size == 0:
        return PromptRecord(
            "user", u,
            f"{NO_HISTORY_MARK} On platform {platform_name}, user_{u} has no positive "
            f"interaction history in any scenario.")

    clauses = []
    for d in range(d_count):
        in_d = pos[ds.domain_ids[pos] == d]
        if in_d.size == 0:
            continue
        recent = in_d[np.argsort(ds.order[in_d], kind="stable")][-recent_limit:]
        rendered = "; ".join(_render_interaction(ds, int(r)) for r in recent)
        lead = (f"In the {scenario_names[d]} scenario, user_{u} clicked"
                if not clauses else
                f"Besides, in the {scenario_names[d]} scenario, this user clicked")
        clauses.append(f"{lead}: {rendered}.")
    names = ", ".join(scenario_names)
    text = (
        f"On platform {platform_name}, suppose there are {_count_word(d_count)} scenarios: "
        f"{names}. " + " ".join(clauses) +
        f" For this user, considering the interaction behavior frequency and item category "
        f"information, if there is no interaction in some scenario, only summarize the "
        f"interest in the other scenarios. Otherwise, explicitly summarize the common "
        f"interest among the {_count_word(d_count)} scenarios first, then summarize the "
        f"distinct interest in each scenario."
    )
    return PromptRecord("user", u, text)


def build_all_prompts(ds: "Dataset", stats: ScenarioStats, recent_limit: int
                      ) -> list[PromptRecord]:
    """All D scenario prompts followed by all U user prompts (schema order)."""
    records = [build_scenario_prompt(stats, d) for d in range(ds.schema.num_scenarios)]
    for u in range(ds.schema.num_users):
        records.append(build_user_prompt(ds, u, recent_limit,
                                         scenario_names=stats.scenario_names,
                                         platform_name=stats.platform_name))
    return records


def write_prompts_jsonl(records: list[PromptRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"scope": rec.scope, "id": rec.id, "text": rec.text},
                                ensure_ascii=False) + "\n")


def stats_from_dataset(ds: "Dataset", platform_name: str, platform_description: str,
                       scenario_names: tuple[str, ...] | None = None,
                       item_field: int = 2) -> ScenarioStats:
    """Compute per-scenario counts and overlaps directly from a dataset."""
    d_count = ds.schema.num_scenarios
    if scenario_names is None:
        scenario_names = tuple(f"scenario_{d}" for d in range(d_count))
    interactions, user_sets, item_sets = [], [], []
    has_items = item_field < ds.schema.num_fields
    for d in range(d_count):
        mask = ds.domain_ids == d
        interactions.append(int(mask.sum()))
        user_sets.append(set(np.unique(ds.user_ids[mask]).tolist()))
        item_sets.append(set(np.unique(ds.features[mask, item_field]).tolist())
                         if has_items else set())
    overlapped_users = len(set.intersection(*user_sets)) if user_sets else 0
    overlapped_items = len(set.intersection(*item_sets)) if has_items else 0
    return ScenarioStats(
        platform_name=platform_name,
        platform_description=platform_description,
        scenario_names=scenario_names,
        interactions=tuple(interactions),
        users=tuple(len(s) for s in user_sets),
        items=tuple(len(s) for s in item_sets),
        overlapped_users=overlapped_users,
        overlapped_items=overlapped_items,
    )


class VectorStore:
    """Immutable map (scope, id) -> H-dimensional knowledge vector.

    Scenario vectors are a hard training precondition, so a scenario miss is
    always an error. User misses follow ``fallback_policy``: "error" raises,
    "zero" substitutes an all-zero vector.
    """

    def __init__(self, dim: int, vectors: dict[tuple[str, int], Array],
                 fallback_policy: str = "error"):
        if dim < 1:
            raise StoreFormatError(f"dim must be >= 1, got {dim}")
        if fallback_policy not in ("error", "zero"):
            raise StoreFormatError(f"fallback_policy must be 'error' or 'zero', "
                                   f"got '{fallback_policy}'")
        self.dim = dim
        self.fallback_policy = fallback_policy
        self._vectors: dict[tuple[str, int], Array] = {}
        for (scope, vid), vec in vectors.items():
            if scope not in SCOPES:
                raise StoreFormatError(f"scope must be one of {SCOPES}, got '{scope}'")
            arr = np.asarray(vec, dtype=np.float64).reshape(-1)
            if arr.shape != (dim,):
                raise StoreFormatError(
                    f"vector ({scope}, {vid}) has {arr.size} values, expected {dim}")
            if not np.all(np.isfinite(arr)):
                raise StoreFormatError(f"vector ({scope}, {vid}) has non-finite values")
            arr.setflags(write=False)
            self._vectors[(scope, int(vid))] = arr
        self._user_cache: Array | None = None
        self._user_present: Array | None = None
        self._scenario_cache: dict[int, Array] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: tuple[str, int]) -> bool:
        return (key[0], int(key[1])) in self._vectors

    def keys(self):
        return self._vectors.keys()

    def get(self, scope: str, vid: int) -> Array:
        key = (scope, int(vid))
        if key in self._vectors:
            return self._vectors[key]
        if scope == "scenario":
            raise VectorMissError(f"missing scenario vector for id {vid}")
        if self.fallback_policy == "zero":
            return np.zeros(self.dim)
        raise VectorMissError(f"missing {scope} vector for id {vid} under policy 'error'")

    def _build_user_cache(self) -> None:
        user_ids = [vid for (scope, vid) in self._vectors if scope == "user"]
        size = max(user_ids) + 1 if user_ids else 0
        self._user_cache = np.zeros((size, self.dim))
        self._user_present = np.zeros(size, dtype=bool)
        for vid in user_ids:
            self._user_cache[vid] = self._vectors[("user", vid)]
            self._user_present[vid] = True

    def user_matrix(self, user_ids: Array) -> Array:
        """Vectors for a batch of user ids, honoring the fallback policy."""
        if self._user_cache is None:
            self._build_user_cache()
        ids = np.asarray(user_ids, dtype=np.int64)
        size = self._user_cache.shape[0]
        in_range = ids < size
        if not in_range.all() or not self._user_present[ids[in_range]].all():
            if self.fallback_policy == "error":
                missing = ids[~in_range] if not in_range.all() else \
                    ids[in_range][~self._user_present[ids[in_range]]]
                raise VectorMissError(
                    f"missing user vector for id {int(missing[0])} under policy 'error'")
            out = np.zeros((ids.size, self.dim))
            ok = in_range.copy()
            ok[in_range] &= self._user_present[ids[in_range]]
            out[ok] = self._user_cache[ids[ok]]
            return out
        return self._user_cache[ids]

    def scenario_matrix(self, num_scenarios: int) -> Array:
        """Stacked vectors for scenarios 0..D-1; any miss is an error."""
        if num_scenarios not in self._scenario_cache:
            self._scenario_cache[num_scenarios] = np.stack(
                [self.get("scenario", d) for d in range(num_scenarios)])
        return self._scenario_cache[num_scenarios]

    def save(self, path: str | Path) -> None:
        """Text format: line 1 ``#dim=H``, then ``scope<TAB>id<TAB>v0,v1,...``.

        Floats are written with 17 significant digits, so a save/load round
        trip is bit-exact.
        """
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(f"#dim={self.dim}\n")
            for (scope, vid) in sorted(self._vectors, key=lambda k: (k[0], k[1])):
                values = ",".join(f"{v:.17g}" for v in self._vectors[(scope, vid)])
                fh.write(f"{scope}\t{vid}\t{values}\n")

    @classmethod
    def load(cls, path: str | Path, fallback_policy: str = "error") -> "VectorStore":
        path = Path(path)
        vectors: dict[tuple[str, int], Array] = {}
        with path.open(encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if not header.startswith("#dim="):
                raise StoreFormatError(f"{path}:1: expected '#dim=H' header, got '{header}'")
            try:
                dim = int(header[len("#dim="):])
            except ValueError:
                raise StoreFormatError(f"{path}:1: bad dim in header '{header}'") from None
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise StoreFormatError(f"{path}:{lineno}: expected 3 tab-separated "
                                           f"columns, got {len(parts)}")
                scope, vid_str, values_str = parts
                if scope not in SCOPES:
                    raise StoreFormatError(f"{path}:{lineno}: unknown scope '{scope}'")
                try:
                    vid = int(vid_str)
                    values = np.asarray([float(v) for v in values_str.split(",")])
                except ValueError as exc:
                    raise StoreFormatError(f"{path}:{lineno}: {exc}") from exc
                if values.size != dim:
                    raise StoreFormatError(
                        f"{path}:{lineno}: row has {values.size} values, header says {dim}")
                vectors[(scope, vid)] = values
        return cls(dim, vectors, fallback_policy=fallback_policy)
