"""Multimodal class-incremental data model.

Datasets are collections of (visual, audio, label) triples with a fixed
train/test split. A task stream partitions the classes into T disjoint
groups that the learner visits sequentially. Raw audio/image decoding is
out of scope: features are either synthetic or ingested from a text
feature file (MCILFEAT v1, see `save_dataset`).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import IngestError, InvalidConfig, InvalidSplit

FEATURE_MAGIC = "MCILFEAT"
FEATURE_VERSION = "v1"

TRAIN_FRACTION = 0.8  # fixed 80/20 per-class split for synthetic data

# Distinct single-token class names used by the synthetic generator so text
# prototypes do not collide on a shared "class" token.
SYNTHETIC_NAMES = (
    "amber", "birch", "cobalt", "dune", "ember", "fjord", "grove", "heron",
    "indigo", "juniper", "kestrel", "lagoon", "meadow", "nettle", "onyx",
    "plume", "quartz", "russet", "sorrel", "thistle", "umber", "vervain",
    "willow", "xenon", "yarrow", "zephyr",
)

#: 35 hard prompt templates used to expand a class name into a prompt set.
DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a blurry photo of a {}",
    "a bright photo of a {}",
    "a dark photo of a {}",
    "a close-up photo of a {}",
    "a cropped photo of a {}",
    "a low resolution photo of a {}",
    "a high resolution photo of a {}",
    "a photo of a small {}",
    "a photo of a large {}",
    "a photo of the {}",
    "a bad photo of a {}",
    "a good photo of a {}",
    "a photo of one {}",
    "a photo of many {}",
    "a picture of a {}",
    "an image showing a {}",
    "a snapshot of a {}",
    "a scene containing a {}",
    "a video frame of a {}",
    "the sound of a {}",
    "a recording of a {}",
    "a loud recording of a {}",
    "a faint recording of a {}",
    "a clear recording of a {}",
    "a noisy recording of a {}",
    "audio captured from a {}",
    "the noise made by a {}",
    "a clip of a {} in a room",
    "a clip of a {} outdoors",
    "a {} seen in a classroom",
    "a {} seen in the wild",
    "a {} recorded indoors",
    "a {} during the day",
    "a {} at night",
)

PLACEHOLDER = "{}"


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str

    def __post_init__(self):
        if self.id < 0:
            raise InvalidConfig(f"class id must be non-negative, got {self.id}")
        if not self.name:
            raise InvalidConfig("class name must be non-empty")


@dataclass(frozen=True)
class MultimodalSample:
    """One (visual, audio, label) triple; vectors are read-only float64."""

    sample_id: int
    visual: np.ndarray
    audio: np.ndarray
    label: int

    def __post_init__(self):
        for tag, vec in (("visual", self.visual), ("audio", self.audio)):
            if vec.ndim != 1:
                raise InvalidConfig(f"{tag} vector of sample {self.sample_id} must be 1-D")
            if not np.all(np.isfinite(vec)):
                raise InvalidConfig(
                    f"{tag} vector of sample {self.sample_id} contains NaN/Inf"
                )
            vec.flags.writeable = False


@dataclass(frozen=True)
class Dataset:
    samples: tuple[MultimodalSample, ...]
    classes: tuple[ClassLabel, ...]
    d_v_raw: int
    d_a_raw: int
    splits: tuple[str, ...]  # "train" | "test", aligned with samples

    def __post_init__(self):
        _validate_dataset(self)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.classes)

    def label_name(self, class_id: int) -> str:
        for c in self.classes:
            if c.id == class_id:
                return c.name
        raise KeyError(class_id)

    def sample_ids_for(self, class_ids, split: str) -> list[int]:
        wanted = set(class_ids)
        return [
            s.sample_id
            for s, sp in zip(self.samples, self.splits)
            if sp == split and s.label in wanted
        ]

    def by_id(self, sample_id: int) -> MultimodalSample:
        return self._index[sample_id]

    @property
    def _index(self) -> dict[int, MultimodalSample]:
        idx = getattr(self, "_index_cache", None)
        if idx is None:
            idx = {s.sample_id: s for s in self.samples}
            object.__setattr__(self, "_index_cache", idx)
        return idx


def _validate_dataset(ds: Dataset) -> None:
    if ds.d_v_raw <= 0 or ds.d_a_raw <= 0:
        raise InvalidConfig("feature dimensions must be positive")
    ids = [c.id for c in ds.classes]
    names = [c.name for c in ds.classes]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("class ids must be unique")
    if len(set(names)) != len(names):
        raise InvalidConfig("class names must be unique")
    if len(ds.splits) != len(ds.samples):
        raise InvalidConfig("split assignment must cover every sample")
    known = set(ids)
    seen_sample_ids = set()
    per_class = {cid: {"train": 0, "test": 0} for cid in known}
    for s, sp in zip(ds.samples, ds.splits):
        if s.label not in known:
            raise InvalidConfig(f"sample {s.sample_id} has unknown label {s.label}")
        if sp not in ("train", "test"):
            raise InvalidConfig(f"sample {s.sample_id} has invalid split {sp!r}")
        if len(s.visual) != ds.d_v_raw or len(s.audio) != ds.d_a_raw:
            raise InvalidConfig(f"sample {s.sample_id} dimensions mismatch the descriptor")
        if s.sample_id in seen_sample_ids:
            raise InvalidConfig(f"duplicate sample id {s.sample_id}")
        seen_sample_ids.add(s.sample_id)
        per_class[s.label][sp] += 1
    for cid, counts in per_class.items():
        if counts["train"] < 1 or counts["test"] < 1:
            raise InvalidConfig(f"class {cid} needs at least one train and one test sample")


@dataclass(frozen=True)
class Task:
    """One incremental step: a disjoint class group plus its sample ids."""

    index: int  # 1-based
    classes: tuple[int, ...]  # ordered class ids
    train_samples: tuple[int, ...]
    test_samples: tuple[int, ...]

    def __post_init__(self):
        if self.index < 1:
            raise InvalidConfig("task index is 1-based")
        if not self.classes:
            raise InvalidConfig(f"task {self.index} has no classes")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, t: int) -> Task:
        """1-based task accessor."""
        return self.tasks[t - 1]

    def classes_up_to(self, t: int) -> tuple[int, ...]:
        """Ordered C_{1:t}: concatenation of the first t class groups."""
        out: list[int] = []
        for task in self.tasks[:t]:
            out.extend(task.classes)
        return tuple(out)


@dataclass(frozen=True)
class PromptTemplateSet:
    """N templates, each containing the placeholder '{}' exactly once."""

    templates: tuple[str, ...]

    def __post_init__(self):
        if len(self.templates) < 1:
            raise InvalidConfig("template set must contain at least one template")
        for i, t in enumerate(self.templates):
            if not t:
                raise InvalidConfig(f"template {i} is empty")
            if t.count(PLACEHOLDER) != 1:
                raise InvalidConfig(
                    f"template {i} ({t!r}) must contain {PLACEHOLDER!r} exactly once"
                )

    def __len__(self) -> int:
        return len(self.templates)


def default_templates(n: int = len(DEFAULT_TEMPLATES)) -> PromptTemplateSet:
    """First n of the built-in 35 templates."""
    if n < 1 or n > len(DEFAULT_TEMPLATES):
        raise InvalidConfig(f"n must be in [1, {len(DEFAULT_TEMPLATES)}], got {n}")
    return PromptTemplateSet(DEFAULT_TEMPLATES[:n])


def expand_label(label: ClassLabel, templates: PromptTemplateSet) -> list[str]:
    """Fill each template with the class name, preserving template order."""
    return [t.replace(PLACEHOLDER, label.name) for t in templates.templates]


def build_stream(dataset: Dataset, T: int, seed: int) -> TaskStream:
    """Shuffle classes with a seeded RNG, then partition into T contiguous groups.

    When |classes| mod T = m != 0, the first m tasks receive one extra class.
    """
    n_classes = len(dataset.classes)
    if T < 1:
        raise InvalidSplit(f"T must be >= 1, got {T}")
    if T > n_classes:
        raise InvalidSplit(f"T={T} exceeds the number of classes ({n_classes})")

    rng = np.random.Generator(np.random.PCG64(seed))
    order = [dataset.classes[i].id for i in rng.permutation(n_classes)]

    base, extra = divmod(n_classes, T)
    tasks = []
    cursor = 0
    for t in range(1, T + 1):
        size = base + (1 if t <= extra else 0)
        group = tuple(order[cursor:cursor + size])
        cursor += size
        tasks.append(
            Task(
                index=t,
                classes=group,
                train_samples=tuple(dataset.sample_ids_for(group, "train")),
                test_samples=tuple(dataset.sample_ids_for(group, "test")),
            )
        )
    return TaskStream(tasks=tuple(tasks), seed=seed)


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for a real multimodal dataset.

    Per class, a visual mean and an independent audio latent are drawn once.
    Visual samples are the mean plus Gaussian noise (sigma_v). Audio samples
    are a fixed projection of (rho * visual mean + (1-rho) * audio latent)
    plus Gaussian noise (sigma_a); sigma_a >> sigma_v realizes a weak audio
    modality.
    """

    n_classes: int = 8
    samples_per_class: int = 40
    d_v_raw: int = 32
    d_a_raw: int = 48
    sigma_v: float = 0.15
    sigma_a: float = 0.75
    rho: float = 1.0
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfig("need at least 2 classes")
        if self.samples_per_class < 2:
            raise InvalidConfig("need at least 2 samples per class (one train, one test)")
        if self.d_v_raw <= 0 or self.d_a_raw <= 0:
            raise InvalidConfig("feature dimensions must be positive")
        if self.sigma_v <= 0 or self.sigma_a <= 0:
            raise InvalidConfig("noise scales must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidConfig(f"rho must be in [0,1], got {self.rho}")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise InvalidConfig("class_names length must equal n_classes")


def _synthetic_name(k: int) -> str:
    if k < len(SYNTHETIC_NAMES):
        return SYNTHETIC_NAMES[k]
    return f"specimen{k}"


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Generate a balanced multimodal Gaussian dataset, bit-deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    K = config.n_classes
    per = config.samples_per_class

    # Fixed cross-space projection shared by all classes.
    proj = rng.normal(0.0, 1.0 / np.sqrt(config.d_v_raw), size=(config.d_v_raw, config.d_a_raw))

    names = config.class_names or tuple(_synthetic_name(k) for k in range(K))
    classes = tuple(ClassLabel(id=k, name=names[k]) for k in range(K))

    n_train = min(per - 1, max(1, int(round(TRAIN_FRACTION * per))))

    samples: list[MultimodalSample] = []
    splits: list[str] = []
    sid = 0
    for k in range(K):
        visual_mean = rng.normal(size=config.d_v_raw)
        audio_latent = rng.normal(size=config.d_v_raw)
        audio_center = (config.rho * visual_mean + (1.0 - config.rho) * audio_latent) @ proj
        for i in range(per):
            visual = visual_mean + rng.normal(0.0, config.sigma_v, size=config.d_v_raw)
            audio = audio_center + rng.normal(0.0, config.sigma_a, size=config.d_a_raw)
            samples.append(
                MultimodalSample(sample_id=sid, visual=visual, audio=audio, label=k)
            )
            splits.append("train" if i < n_train else "test")
            sid += 1

    return Dataset(
        samples=tuple(samples),
        classes=classes,
        d_v_raw=config.d_v_raw,
        d_a_raw=config.d_a_raw,
        splits=tuple(splits),
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write the MCILFEAT v1 text format.

    Header: `MCILFEAT v1 <n_samples> <d_v_raw> <d_a_raw> <n_classes>`, one
    `CLASS <id> <name>` line per class, then one line per sample:
    `<sample_id> <label_id> <train|test>` followed by the visual floats and
    the audio floats. Floats are written with shortest round-trip repr, so a
    load reproduces them bit-exactly.
    """
    lines = [
        f"{FEATURE_MAGIC} {FEATURE_VERSION} {len(dataset.samples)} "
        f"{dataset.d_v_raw} {dataset.d_a_raw} {len(dataset.classes)}"
    ]
    for c in dataset.classes:
        lines.append(f"CLASS {c.id} {c.name}")
    for s, sp in zip(dataset.samples, dataset.splits):
        values = " ".join(repr(float(x)) for x in np.concatenate([s.visual, s.audio]))
        lines.append(f"{s.sample_id} {s.label} {sp} {values}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_precomputed(path) -> Dataset:
    """Load an MCILFEAT v1 feature file; raises IngestError with row context."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise IngestError(f"cannot read feature file {path}: {exc}") from exc

    lines = [ln for ln in raw_lines if ln.strip()]
    if not lines:
        raise IngestError(f"{path}: empty feature file")

    header = lines[0].split()
    if len(header) != 6 or header[0] != FEATURE_MAGIC or header[1] != FEATURE_VERSION:
        raise IngestError(f"{path}: malformed header {lines[0]!r}")
    try:
        n_samples, d_v, d_a, n_classes = (int(x) for x in header[2:])
    except ValueError as exc:
        raise IngestError(f"{path}: non-integer header counts in {lines[0]!r}") from exc
    if n_samples < 0 or d_v <= 0 or d_a <= 0 or n_classes < 1:
        raise IngestError(f"{path}: invalid header counts in {lines[0]!r}")

    if len(lines) != 1 + n_classes + n_samples:
        raise IngestError(
            f"{path}: expected {1 + n_classes + n_samples} lines "
            f"(header + {n_classes} classes + {n_samples} samples), found {len(lines)}"
        )

    classes = []
    for row in range(1, 1 + n_classes):
        parts = lines[row].split(maxsplit=2)
        if len(parts) != 3 or parts[0] != "CLASS":
            raise IngestError(f"{path}: row {row}: malformed class line {lines[row]!r}")
        try:
            cid = int(parts[1])
        except ValueError as exc:
            raise IngestError(f"{path}: row {row}: bad class id {parts[1]!r}") from exc
        classes.append(ClassLabel(id=cid, name=parts[2]))
    known = {c.id for c in classes}

    samples = []
    splits = []
    for row in range(1 + n_classes, len(lines)):
        tokens = lines[row].split()
        expected = 3 + d_v + d_a
        if len(tokens) != expected:
            raise IngestError(
                f"{path}: row {row}: expected {expected} fields, found {len(tokens)}"
            )
        try:
            sid = int(tokens[0])
            label = int(tokens[1])
        except ValueError as exc:
            raise IngestError(f"{path}: row {row}: bad sample/label id") from exc
        split = tokens[2]
        if split not in ("train", "test"):
            raise IngestError(f"{path}: row {row}: invalid split {split!r}")
        if label not in known:
            raise IngestError(f"{path}: row {row}: unknown label id {label}")
        try:
            values = np.array([float(x) for x in tokens[3:]], dtype=np.float64)
        except ValueError as exc:
            raise IngestError(f"{path}: row {row}: non-numeric feature value") from exc
        if not np.all(np.isfinite(values)):
            raise IngestError(f"{path}: row {row}: non-finite feature value")
        samples.append(
            MultimodalSample(
                sample_id=sid,
                visual=values[:d_v].copy(),
                audio=values[d_v:].copy(),
                label=label,
            )
        )
        splits.append(split)

    try:
        return Dataset(
            samples=tuple(samples),
            classes=tuple(classes),
            d_v_raw=d_v,
            d_a_raw=d_a,
            splits=tuple(splits),
        )
    except InvalidConfig as exc:
        raise IngestError(f"{path}: {exc}") from exc


def nearest_centroid_accuracy(
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
) -> float:
    """Top-1 accuracy of a 1-nearest-centroid classifier on raw features."""
    labels = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in labels])
    d2 = ((eval_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = labels[np.argmin(d2, axis=1)]
    return float(np.mean(pred == eval_y))


def modality_arrays(dataset: Dataset, sample_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (visual, audio, label) arrays for the given sample ids."""
    sams = [dataset.by_id(i) for i in sample_ids]
    vis = np.stack([s.visual for s in sams]) if sams else np.zeros((0, dataset.d_v_raw))
    aud = np.stack([s.audio for s in sams]) if sams else np.zeros((0, dataset.d_a_raw))
    labels = np.array([s.label for s in sams], dtype=np.int64)
    return vis, aud, labels
