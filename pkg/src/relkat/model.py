"""Model assembly: encoder, knowledge module, projector, and per-task heads,
with teacher-student EMA, forward passes, and byte-exact checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import knowledge as kn
from .autodiff import Tensor
from .errors import CheckpointError, ShapeMismatchError, TaskRegistryError
from .layers import Linear, Mlp
from .seeding import rng_for, stable_hash


@dataclass
class EncoderConfig:
    input_dim: int = 16
    embedding_dim: int = 32
    depth: int = 2
    hidden_dim: int = 64
    nonlinearity: str = "tanh"

    def __post_init__(self) -> None:
        if min(self.input_dim, self.embedding_dim, self.depth, self.hidden_dim) < 1:
            raise ValueError(f"encoder dimensions must be positive: {self}")


@dataclass
class ModelConfig:
    """Shapes of every component; hidden width defaults to twice the knowledge
    width and the projector to the knowledge width."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kb_width: int = 32
    mlp_hidden: int = 0  # 0 means 2 * kb_width
    projector_dim: int = 0  # 0 means kb_width
    tau: float = 0.1

    def __post_init__(self) -> None:
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.mlp_hidden == 0:
            self.mlp_hidden = 2 * self.kb_width
        if self.projector_dim == 0:
            self.projector_dim = self.kb_width
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


class TaskHead(Linear):
    """Linear classifier from the fused width to one task's label space."""

    def __init__(self, task_id: str, kb_width: int, n_classes: int, rng):
        if n_classes < 2:
            raise TaskRegistryError(f"head {task_id!r} needs at least 2 classes")
        super().__init__(kb_width, n_classes, rng)
        self.task_id = task_id
        self.n_classes = n_classes


@dataclass
class TaskForward:
    """Intermediates of one forward pass, kept for loss assembly and export."""

    task_id: str
    encoded: Tensor
    posterior: Tensor
    relevance: kn.RelevanceWeights
    prior: Tensor
    fused: Tensor
    projected: Tensor
    logits: Tensor


class ModelState:
    """All parameters of one student or teacher instance."""

    def __init__(
        self,
        config: ModelConfig,
        encoder: Mlp,
        template: kn.PosteriorTemplate,
        generator: kn.PosteriorGenerator,
        fusion: kn.FusionBlock,
        projector: Linear,
        kb: kn.KnowledgeBase,
        heads: dict[str, TaskHead],
        role: str = "student",
    ):
        if list(heads) != kb.task_ids:
            raise TaskRegistryError(
                f"heads {list(heads)} do not match knowledge base tasks {kb.task_ids}"
            )
        if role not in ("student", "teacher"):
            raise ValueError(f"role must be student or teacher, got {role!r}")
        self.config = config
        self.encoder = encoder
        self.template = template
        self.generator = generator
        self.fusion = fusion
        self.projector = projector
        self.kb = kb
        self.heads = heads
        self.role = role

    # -- construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        tasks: list[tuple[str, int]],
        seed: int,
        role: str = "student",
    ) -> "ModelState":
        enc = config.encoder
        encoder = Mlp(
            enc.input_dim,
            enc.hidden_dim,
            enc.embedding_dim,
            rng_for(seed, "init", "encoder"),
            depth=enc.depth,
            nonlinearity=enc.nonlinearity,
        )
        template = kn.PosteriorTemplate.create(config.kb_width, seed)
        generator = kn.PosteriorGenerator(
            enc.embedding_dim, config.kb_width, config.mlp_hidden, rng_for(seed, "init", "generator")
        )
        fusion = kn.FusionBlock(config.kb_width, config.mlp_hidden, rng_for(seed, "init", "fusion"))
        projector = Linear(
            config.kb_width, config.projector_dim, rng_for(seed, "init", "projector"), bias=False
        )
        kb = kn.KnowledgeBase.create([t for t, _ in tasks], config.kb_width, seed)
        heads = {
            task_id: TaskHead(
                task_id, config.kb_width, n_classes,
                rng_for(seed, "init", "head", stable_hash(task_id)),
            )
            for task_id, n_classes in tasks
        }
        return cls(config, encoder, template, generator, fusion, projector, kb, heads, role)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.encoder.named_params("encoder"):
            out[name] = p
        for name, p in self.template.named_params("template"):
            out[name] = p
        for name, p in self.generator.named_params("generator"):
            out[name] = p
        for name, p in self.fusion.named_params("fusion"):
            out[name] = p
        for name, p in self.projector.named_params("projector"):
            out[name] = p
        for name, p in self.kb.named_params("kb"):
            out[name] = p
        for task_id in self.kb.task_ids:
            for name, p in self.heads[task_id].named_params(f"heads.{task_id}"):
                out[name] = p
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    @property
    def task_registry(self) -> list[tuple[str, int]]:
        return [(t, self.heads[t].n_classes) for t in self.kb.task_ids]

    def clone(self, role: str | None = None, trainable: bool | None = None) -> "ModelState":
        """Structural copy with fresh parameter buffers."""
        role = role or self.role
        out = ModelState.create(self.config, self.task_registry, seed=0, role=role)
        for name, p in out.named_params().items():
            p.data = self.named_params()[name].data.copy()
            if trainable is not None:
                p.requires_grad = trainable
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_params().items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def add_task(self, task_id: str, n_classes: int, seed: int) -> None:
        """Register one more task: fresh orthogonal knowledge row plus head."""
        self.kb = kn.append_task(self.kb, task_id, seed)
        self.heads[task_id] = TaskHead(
            task_id, self.config.kb_width, n_classes,
            rng_for(seed, "init", "head", stable_hash(task_id)),
        )

    # -- forward passes ------------------------------------------------------

    def _pipeline(self, features):
        """Batched task-independent pipeline up to the fused vector."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.data.ndim not in (1, 2) or x.shape[-1] != self.config.encoder.input_dim:
            raise ShapeMismatchError("forward", x.shape, (self.config.encoder.input_dim,))
        single = x.data.ndim == 1
        xb = ad.broadcast_rows(x, 1) if single else x
        encoded = self.encoder(xb)
        posterior = kn.posterior_knowledge(encoded, self.template, self.generator)
        relevance = kn.relevance_weights(posterior, self.kb, self.config.tau)
        prior = kn.aggregate_prior(relevance, self.kb)
        fused = kn.fuse(posterior, prior, self.fusion)
        return single, encoded, posterior, relevance, prior, fused

    def forward(self, features, task_id: str) -> TaskForward:
        """Full pass for one task; a 1-D input yields unbatched shapes."""
        if task_id not in self.heads:
            raise TaskRegistryError(
                f"unknown task {task_id!r}; registered: {self.kb.task_ids}"
            )
        single, encoded, posterior, relevance, prior, fused = self._pipeline(features)
        projected = self.projector(fused)
        logits = self.heads[task_id](fused)
        if single:
            relevance = kn.RelevanceWeights(
                ad.squeeze_lead(relevance.similarities),
                ad.squeeze_lead(relevance.weights),
                relevance.temperature,
            )
            encoded, posterior, prior, fused, projected, logits = (
                ad.squeeze_lead(v) for v in (encoded, posterior, prior, fused, projected, logits)
            )
        return TaskForward(task_id, encoded, posterior, relevance, prior, fused, projected, logits)

    def embed(self, features) -> np.ndarray:
        """Fused representation with no head applied and no graph recorded."""
        with ad.no_grad():
            single, *_, fused = self._pipeline(features)
        return fused.data[0] if single else fused.data

    def relevance_of(self, features) -> np.ndarray:
        """Relevance weights only, no graph recorded."""
        with ad.no_grad():
            single, _, _, relevance, _, _ = self._pipeline(features)
        w = relevance.weights.data
        return w[0] if single else w

    def head_logits(self, fused: Tensor, task_id: str) -> Tensor:
        if task_id not in self.heads:
            raise TaskRegistryError(
                f"unknown task {task_id!r}; registered: {self.kb.task_ids}"
            )
        return self.heads[task_id](fused)


def ema_update(teacher: ModelState, student: ModelState, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    t_params = teacher.named_params()
    s_params = student.named_params()
    if t_params.keys() != s_params.keys():
        raise ShapeMismatchError("ema_update", (len(t_params),), (len(s_params),))
    if momentum == 1.0:
        return
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ShapeMismatchError("ema_update", tp.shape, sp.shape)
        if momentum == 0.0:
            tp.data = sp.data.copy()
        else:
            tp.data = momentum * tp.data + (1.0 - momentum) * sp.data


def consistency_loss(student_projected: Tensor, teacher_projected) -> Tensor:
    """Mean cosine distance between projections; the teacher side is constant.

    Clamped at zero: rounding can push the cosine of identical projections a
    hair past one, and the loss must stay nonnegative.
    """
    target = (
        Tensor(teacher_projected.data)
        if isinstance(teacher_projected, Tensor)
        else Tensor(np.asarray(teacher_projected, dtype=np.float64))
    )
    if student_projected.shape != target.shape:
        raise ShapeMismatchError("consistency_loss", student_projected.shape, target.shape)
    cos = ad.cosine_similarity(student_projected, target)
    return ad.mean_all(ad.relu(1.0 - cos))


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON header, float64 little-endian blocks
# ---------------------------------------------------------------------------

_MAGIC = b"RELKATCK"
_VERSION = 1


def checkpoint_save(state: ModelState, path: Path) -> None:
    params = state.named_params()
    header = {
        "role": state.role,
        "config": {
            "encoder": asdict(state.config.encoder),
            "kb_width": state.config.kb_width,
            "mlp_hidden": state.config.mlp_hidden,
            "projector_dim": state.config.projector_dim,
            "tau": state.config.tau,
        },
        "tasks": [{"task_id": t, "n_classes": c} for t, c in state.task_registry],
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def checkpoint_load(path: Path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    offset = len(_MAGIC)
    version, header_len = struct.unpack_from("<IQ", raw, offset)
    offset += struct.calcsize("<IQ")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    offset += header_len
    config = ModelConfig(
        encoder=EncoderConfig(**header["config"]["encoder"]),
        kb_width=header["config"]["kb_width"],
        mlp_hidden=header["config"]["mlp_hidden"],
        projector_dim=header["config"]["projector_dim"],
        tau=header["config"]["tau"],
    )
    tasks = [(t["task_id"], t["n_classes"]) for t in header["tasks"]]
    state = ModelState.create(config, tasks, seed=0, role=header["role"])
    params = state.named_params()
    declared = [(entry["name"], tuple(entry["shape"])) for entry in header["params"]]
    if [(n, p.shape) for n, p in params.items()] != declared:
        raise CheckpointError(f"{path}: parameter table does not match the declared dimensions")
    for name, shape in declared:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter block {name}")
        params[name].data = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    if state.role == "teacher":
        for p in params.values():
            p.requires_grad = False
    return state
