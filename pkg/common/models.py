"""Pydantic models for configuration and on-disk records."""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pydantic

from .errors import DataError, UsageError

NamedTripleModel = Tuple[str, str, str]


def _read_json(path: Union[str, Path]) -> Any:
    """Read a JSON document, turning io and syntax problems into errors."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"{path} does not exist") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None


def _offending_keys(error: pydantic.ValidationError) -> list[str]:
    return sorted({str(e["loc"][0]) for e in error.errors() if e["loc"]})


class TaskRecord(pydantic.BaseModel):
    """One few-shot task as stored in ``tasks/*.json``."""

    relation: str
    support: List[NamedTripleModel]
    queries: List[NamedTripleModel]
    candidates: Optional[List[List[str]]] = None

    @pydantic.validator("candidates")
    def one_pool_per_query(
        cls, value: Optional[list], values: dict  # noqa: N805
    ) -> Optional[list]:
        """Candidate pools, when present, line up with the queries."""
        queries = values.get("queries")
        if value is not None and queries is not None:
            if len(value) != len(queries):
                raise ValueError("need one candidate list per query")
        return value


def load_task_records(path: Union[str, Path]) -> list[TaskRecord]:
    """Parse a task file."""
    try:
        return pydantic.parse_obj_as(List[TaskRecord], _read_json(path))
    except pydantic.ValidationError as e:
        raise DataError(f"{path}: malformed task file ({e})") from None


def dump_task_records(path: Union[str, Path], records: list[TaskRecord]):
    """Write a task file with stable key order."""
    data = [record.dict(exclude_none=True) for record in records]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=1)
        f.write("\n")


class FileModel(pydantic.BaseModel):
    """A model that can be read from a flat JSON file."""

    class Config:
        extra = pydantic.Extra.forbid

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "FileModel":
        """Load from a file; non-None overrides win over file values."""
        data = {}
        if path is not None:
            data = _read_json(path)
            if not isinstance(data, dict):
                raise UsageError(f"{path} must hold a flat JSON object")
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        return cls.from_mapping(data)

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "FileModel":
        """Validate a mapping, naming the offending keys on failure."""
        try:
            return cls(**data)
        except pydantic.ValidationError as e:
            raise UsageError(
                f"invalid {cls.__name__}", _offending_keys(e)
            ) from None


class TrainConfig(FileModel):
    """Hyperparameters of a training run."""

    # Optimisation.
    lr: float = 1e-5
    gamma: float = 1.0
    tau: float = 0.7
    K: int = 3
    n: int = 1
    T: int = 1
    temperature: float = 1.0
    w_z: float = 1.0
    w_mask: float = 1.0
    max_epochs: int = 10
    episodes_per_epoch: int = 100
    batch_size: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # Architecture.
    hop_k: int = 2
    d_edge: int = 128
    d_z: int = 100
    L: int = 3
    use_np_extractor: bool = True
    use_gsat_predictor: bool = True

    # Validation and evaluation.
    eval_every: int = 50
    patience: int = 10
    n_candidates: int = 50
    eval_samples: int = 1
    explain_threshold: float = 0.5
    threads: int = 1

    @pydantic.validator("gamma", "lr", "temperature")
    def strictly_positive(cls, value: float) -> float:  # noqa: N805
        """Margins, rates and temperatures must be above zero."""
        if not value > 0:
            raise ValueError("must be > 0")
        return value

    @pydantic.validator("tau", "explain_threshold")
    def open_unit_interval(cls, value: float) -> float:  # noqa: N805
        """Probabilities used as priors or cut-offs lie in (0, 1)."""
        if not 0 < value < 1:
            raise ValueError("must lie in (0, 1)")
        return value

    @pydantic.validator(
        "K",
        "n",
        "T",
        "hop_k",
        "d_edge",
        "d_z",
        "L",
        "max_epochs",
        "episodes_per_epoch",
        "batch_size",
        "eval_every",
        "patience",
        "n_candidates",
        "eval_samples",
        "threads",
    )
    def at_least_one(cls, value: int) -> int:  # noqa: N805
        """Counts and dimensions are positive."""
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @pydantic.validator("w_z", "w_mask")
    def non_negative(cls, value: float) -> float:  # noqa: N805
        """KL weights may switch a term off but never flip its sign."""
        if value < 0:
            raise ValueError("must be >= 0")
        return value


class SplitSpec(FileModel):
    """Which relations become validation and test tasks in ``prepare``."""

    valid: List[str] = []
    test: List[str] = []
    shots: int = 3
    query_fraction: float = 1.0
    n_candidates: int = 50
    transductive: bool = False
    seed: int = 0

    @pydantic.validator("query_fraction")
    def fraction(cls, value: float) -> float:  # noqa: N805
        """At least some queries must survive subsampling."""
        if not 0 < value <= 1:
            raise ValueError("must lie in (0, 1]")
        return value


class SynthSpec(FileModel):
    """A planted two-hop rule and the size of the generated graph."""

    chain: Tuple[str, str] = ("requires", "works_in")
    target: str = "located_in"
    n_entities: int = 60
    n_pairs: int = 20
    n_distractors: int = 40
    n_distractor_relations: int = 3
    held_out: float = 0.4
    shots: int = 3
    n_candidates: int = 10
    seed: int = 0

    @pydantic.validator("chain")
    def distinct_chain(
        cls, value: Tuple[str, str]  # noqa: N805
    ) -> Tuple[str, str]:
        """A chain needs two relation names."""
        if not all(value):
            raise ValueError("chain relations must be named")
        return value


class WeightedEdge(pydantic.BaseModel):
    """A named triple with its edge probability."""

    triple: NamedTripleModel
    p: float


class Explanation(pydantic.BaseModel):
    """The hypothesis-selected part of a query's enclosing subgraph."""

    query: NamedTripleModel
    kept: List[WeightedEdge]
    dropped: List[WeightedEdge]
    threshold: float
    task_id: int
    seed: int
    top_k: Optional[int] = None
    warning: Optional[str] = None


class TaskMetrics(pydantic.BaseModel):
    """Ranking metrics of a single task."""

    relation: str
    mrr: float
    hit1: float
    hit5: float
    hit10: float
    n_queries: int


class MetricsReport(pydantic.BaseModel):
    """Aggregate ranking metrics of an evaluation run."""

    mrr: float
    hit1: float
    hit5: float
    hit10: float
    n_queries: int
    per_task: List[TaskMetrics] = []

    @property
    def hits(self) -> dict[int, float]:
        """Hit@N keyed by N."""
        return {1: self.hit1, 5: self.hit5, 10: self.hit10}

    def table(self) -> str:
        """Flat tab separated rendering for diffing runs."""
        rows = ["scope\tmrr\thit1\thit5\thit10\tn_queries"]
        for item in [*self.per_task, self]:
            scope = getattr(item, "relation", "all")
            rows.append(
                f"{scope}\t{item.mrr:.6f}\t{item.hit1:.6f}\t"
                f"{item.hit5:.6f}\t{item.hit10:.6f}\t{item.n_queries}"
            )
        return "\n".join(rows) + "\n"


class LossReport(pydantic.BaseModel):
    """The components of one episode's objective."""

    total: float
    ranking: float
    kl_z: float
    kl_mask: float
    relation: str
    K: int
    n_support_edges: int
    n_query_edges: int
    # The constant of the mask KL depends only on these two values.
    mask_const_args: Tuple[int, float]


class ValidationRecord(pydantic.BaseModel):
    """One line of the metrics log, written after each validation round."""

    episode: int
    total: float
    ranking: float
    kl_z: float
    kl_mask: float
    val_mrr: Optional[float] = None
    tau: float
