"""
Synthetic chest-film dataset, the annotation manifest, the 7:1:2 split and the
torch Dataset that feeds training.

Positive samples carry a bright blob whose quadrant and size, together with the
background ramp, pick every phrase of the report; negatives have no blob and
draw "no finding" sentences keyed by the ramp alone. The
keyword "Note" appears iff the sample is positive, so the label, keyword and
random retrieval strategies can be compared on one corpus.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.nn.utils.rnn import pad_sequence
from torch.utils.data import Dataset

from ..errors import InvalidParameterError, ManifestParseError, ManifestValidationError
from .text import PAD_ID, Vocabulary, normalize

logger = logging.getLogger(__name__)

LABEL_NAMES = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)
NO_FINDING = 0
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

# quadrant -> label; quadrants are TL, TR, BL, BR with the patient's right on the image left
QUADRANT_LABELS = ("Lung Opacity", "Consolidation", "Pleural Effusion", "Atelectasis")
SEVERITY_SIGMAS = (16.0, 11.0, 8.0)  # blob sigma = image_size / divisor
BACKGROUNDS = 4  # ramp direction x orientation


@dataclass(frozen=True)
class PhraseBank:
    """
    Sentence templates per polarity and the slot words they draw from.

    Every choice is a function of what the image shows (quadrant, blob size and
    background ramp), so a report is learnable from its image alone.
    """

    findings: Dict[str, Tuple[str, ...]] = field(
        default_factory=lambda: {
            "Lung Opacity": (
                "there is a {severity} focal opacity in the {location}",
                "{severity} airspace opacity projects over the {location}",
                "an ill defined {severity} opacity is noted in the {location}",
                "a {severity} nodular density overlies the {location}",
            ),
            "Consolidation": (
                "{severity} consolidation is seen in the {location}",
                "there is {severity} dense consolidation involving the {location}",
                "airspace consolidation of {severity} extent occupies the {location}",
                "{severity} confluent consolidation with air bronchograms fills the {location}",
            ),
            "Pleural Effusion": (
                "a {severity} pleural effusion layers along the {location}",
                "there is a {severity} effusion with blunting of the {location}",
                "{severity} pleural fluid collects adjacent to the {location}",
                "a {severity} meniscus of fluid tracks toward the {location}",
            ),
            "Atelectasis": (
                "there is {severity} atelectasis at the {location}",
                "{severity} linear atelectasis is present in the {location}",
                "subsegmental atelectasis of {severity} degree affects the {location}",
                "{severity} volume loss with plate like atelectasis involves the {location}",
            ),
        }
    )
    locations: Tuple[Tuple[str, ...], ...] = (
        ("right upper lobe", "right apex", "right upper zone"),
        ("left upper lobe", "left apex", "lingula"),
        ("right costophrenic angle", "right lung base", "right lower zone"),
        ("left lower lobe", "left retrocardiac region", "left base"),
    )
    severities: Tuple[Tuple[str, ...], ...] = (
        ("mild", "minimal", "trace"),
        ("moderate", "intermediate", "partial"),
        ("marked", "extensive", "large"),
    )
    follow_ups: Tuple[str, ...] = (
        "clinical correlation is advised",
        "comparison with prior imaging is recommended",
        "a follow up radiograph may be considered",
        "consider chest computed tomography for further evaluation",
        "findings were communicated to the referring physician",
        "short interval reassessment after treatment is suggested",
    )
    negatives: Tuple[str, ...] = (
        "no acute cardiopulmonary abnormality",
        "the lungs are well expanded and clear",
        "there is no focal airspace disease",
        "no pneumothorax or pleural fluid is identified",
        "the lungs are clear",
        "pulmonary vascularity is within normal limits",
        "no evidence of pulmonary edema",
        "both hemidiaphragms are smooth and sharp",
        "the trachea is midline",
        "costophrenic sulci are preserved bilaterally",
        "no suspicious pulmonary nodule or mass",
        "there is no interval change",
        "no consolidation effusion or collapse",
        "cardiomediastinal silhouette remains within normal size",
        "there is no free subdiaphragmatic gas",
        "lung volumes are adequate without hyperinflation",
    )
    backgrounds: Tuple[Tuple[str, ...], ...] = (
        ("the heart size is normal", "cardiac silhouette is unremarkable", "heart is not enlarged"),
        ("the mediastinal contours are within normal limits", "the hilar contours are stable", "aortic knob is normal"),
        ("osseous structures are intact", "no displaced rib fracture is seen", "degenerative changes of the spine"),
        ("the visualized upper abdomen is unremarkable", "soft tissues appear normal", "monitoring leads overlie the chest"),
    )

    def __post_init__(self):
        missing = [label for label in QUADRANT_LABELS if not self.findings.get(label)]
        if missing:
            raise InvalidParameterError(f"phrase bank has no finding templates for {missing}")
        if len(self.locations) != len(QUADRANT_LABELS) or len(self.severities) != len(SEVERITY_SIGMAS):
            raise InvalidParameterError(
                f"phrase bank needs {len(QUADRANT_LABELS)} location and {len(SEVERITY_SIGMAS)} severity groups"
            )
        if len(self.backgrounds) != BACKGROUNDS or len(self.negatives) < BACKGROUNDS:
            raise InvalidParameterError(f"phrase bank needs {BACKGROUNDS} background groups and as many negatives")
        if not all((*self.locations, *self.severities, *self.backgrounds, self.follow_ups)):
            raise InvalidParameterError("phrase bank slots must not be empty")
        for template in (t for templates in self.findings.values() for t in templates):
            if "{severity}" not in template or "{location}" not in template:
                raise InvalidParameterError(f"finding template lacks a slot: '{template}'")

    def finding(self, quadrant: int, severity: int, background: int) -> str:
        templates = self.findings[QUADRANT_LABELS[quadrant]]
        words, locations = self.severities[severity], self.locations[quadrant]
        return templates[(severity + background) % len(templates)].format(
            severity=words[(quadrant + background) % len(words)],
            location=locations[(severity + quadrant) % len(locations)],
        )

    def finding_sentences(self, label: str) -> Set[str]:
        """Every sentence the bank can render for one disease label."""
        return {
            template.format(severity=word, location=location)
            for template in self.findings[label]
            for word in itertools.chain(*self.severities)
            for location in self.locations[QUADRANT_LABELS.index(label)]
        }

    def positive_report(self, keyword: str, quadrant: int, severity: int, background: int) -> str:
        follow_up = self.follow_ups[(quadrant + severity + background) % len(self.follow_ups)]
        options = self.backgrounds[background]
        context = options[(quadrant + severity) % len(options)]
        return f"{keyword}: {self.finding(quadrant, severity, background)}. {follow_up}. {context}."

    def negative_report(self, background: int) -> str:
        sentences = self.negatives[background :: len(self.backgrounds)]
        return ". ".join((*sentences, self.backgrounds[background][0])) + "."

    def vocabulary(self, keyword: str = "Note") -> Tuple[str, ...]:
        """Sorted word types the bank can emit, keyword included."""
        texts = [keyword, *self.follow_ups, *self.negatives]
        texts += [t.format(severity="", location="") for templates in self.findings.values() for t in templates]
        texts += [s for options in (*self.locations, *self.severities, *self.backgrounds) for s in options]
        return tuple(sorted({tok for text in texts for tok in normalize(text)}))


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image: str
    report: str
    labels: Tuple[bool, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.id or any(c in self.id for c in "\t\n"):
            raise ManifestValidationError(f"invalid sample id {self.id!r}")
        if len(self.labels) != len(LABEL_NAMES):
            raise ManifestValidationError(f"{self.id}: expected {len(LABEL_NAMES)} label flags, got {len(self.labels)}")
        if self.split not in SPLITS:
            raise ManifestValidationError(f"{self.id}: unknown split tag '{self.split}'")
        object.__setattr__(self, "labels", tuple(bool(v) for v in self.labels))

    @property
    def no_finding(self) -> bool:
        return self.labels[NO_FINDING]


@dataclass
class Manifest:
    records: List[SampleRecord]
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise ManifestValidationError(f"duplicate sample id '{record.id}'")
            seen.add(record.id)

    def by_id(self) -> Dict[str, SampleRecord]:
        return {r.id: r for r in self.records}

    def split(self, tag: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == tag]


@dataclass
class SyntheticConfig:
    num_samples: int = 64
    image_size: int = 32
    prevalence: float = 0.5
    noise: float = 0.05
    blob_amplitude: float = 1.0
    keyword: str = "Note"
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    phrases: PhraseBank = field(default_factory=PhraseBank)

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise InvalidParameterError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.image_size < 8 or self.image_size % 4:
            raise InvalidParameterError(f"image size must be >= 8 and a multiple of 4, got {self.image_size}")
        if self.num_samples < 1:
            raise InvalidParameterError("num_samples must be positive")

    @property
    def vocabulary(self) -> Tuple[str, ...]:
        return self.phrases.vocabulary(self.keyword)


@dataclass
class DatasetSplit:
    train: List[str]
    val: List[str]
    test: List[str]

    def tag_of(self) -> Dict[str, str]:
        return {
            **{i: "train" for i in self.train},
            **{i: "val" for i in self.val},
            **{i: "test" for i in self.test},
        }


def split_dataset(ids: Sequence[str], ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous slices; val/test get floor(N*r) and train takes the remainder."""
    if not ids:
        raise InvalidParameterError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidParameterError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ids)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


def _render_sample(rng: np.random.Generator, cfg: SyntheticConfig, positive: bool) -> Tuple[np.ndarray, str, Tuple[bool, ...]]:
    size = cfg.image_size
    background = int(rng.integers(BACKGROUNDS))
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float64)
    if background >= 2:
        ramp = ramp[::-1]
    gradient = np.tile(ramp, (size, 1)) if background % 2 == 0 else np.tile(ramp[:, None], (1, size))
    image = 0.2 + 0.1 * gradient + cfg.noise * rng.standard_normal((size, size))

    labels = [False] * len(LABEL_NAMES)
    if positive:
        quadrant = int(rng.integers(4))
        severity = int(rng.integers(len(SEVERITY_SIGMAS)))
        jitter = max(1, size // 16)
        cy = (size // 4) * (1 + 2 * (quadrant // 2)) + int(rng.integers(-jitter, jitter + 1))
        cx = (size // 4) * (1 + 2 * (quadrant % 2)) + int(rng.integers(-jitter, jitter + 1))
        sigma = size / SEVERITY_SIGMAS[severity]
        yy, xx = np.mgrid[0:size, 0:size]
        image += cfg.blob_amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        labels[LABEL_NAMES.index(QUADRANT_LABELS[quadrant])] = True
        report = cfg.phrases.positive_report(cfg.keyword, quadrant, severity, background)
    else:
        labels[NO_FINDING] = True
        report = cfg.phrases.negative_report(background)
    return np.clip(image, 0.0, None).astype(np.float32)[None], report, tuple(labels)


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir: Union[str, Path]) -> Manifest:
    """Write images/<id>.npy plus manifest.tsv under out_dir and return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    width = max(4, len(str(cfg.num_samples - 1)))
    ids = [f"s{i:0{width}d}" for i in range(cfg.num_samples)]
    tags = split_dataset(ids, cfg.ratios, cfg.seed).tag_of()

    records = []
    for sample_id in ids:
        positive = bool(rng.random() < cfg.prevalence)
        image, report, labels = _render_sample(rng, cfg, positive)
        rel = f"images/{sample_id}.npy"
        np.save(out_dir / rel, image)
        records.append(SampleRecord(sample_id, rel, report, labels, tags[sample_id]))

    positives = sum(1 for r in records if not r.no_finding)
    manifest = Manifest(
        records=records,
        metadata={
            "seed": str(cfg.seed),
            "samples": str(cfg.num_samples),
            "positives": str(positives),
            "image_size": str(cfg.image_size),
        },
    )
    save_manifest(manifest, out_dir / "manifest.tsv")
    logger.info(f"Generated {cfg.num_samples} synthetic samples ({positives} positive) in {out_dir}")
    return manifest


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str, line_number: int) -> str:
    out = []
    chars = iter(text)
    for c in chars:
        if c != "\\":
            out.append(c)
            continue
        nxt = next(chars, None)
        mapped = {"\\": "\\", "t": "\t", "n": "\n"}.get(nxt)
        if mapped is None:
            raise ManifestParseError(f"bad escape sequence '\\{nxt or ''}'", line_number)
        out.append(mapped)
    return "".join(out)


def save_manifest(manifest: Union[Manifest, List[SampleRecord]], path: Union[str, Path]) -> None:
    """Header line, then one tab-separated record per line: id, image, report, flags, split."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest(records=list(manifest))
    meta = " ".join(f"{k}={v}" for k, v in manifest.metadata.items())
    lines = [f"# manifest v{MANIFEST_VERSION} {meta}".rstrip()]
    for r in manifest.records:
        flags = "".join("1" if v else "0" for v in r.labels)
        lines.append("\t".join([r.id, r.image, _escape(r.report), flags, r.split]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Union[str, Path]) -> Manifest:
    text = Path(path).read_text(encoding="utf-8")
    records: List[SampleRecord] = []
    metadata: Dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line_number == 1:
                parts = line[1:].split()
                if not parts or parts[0] != "manifest" or parts[1:2] != [f"v{MANIFEST_VERSION}"]:
                    raise ManifestParseError(f"unsupported manifest header '{line}'", line_number)
                for item in parts[2:]:
                    key, sep, value = item.partition("=")
                    if not sep:
                        raise ManifestParseError(f"bad header field '{item}'", line_number)
                    metadata[key] = value
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ManifestParseError(f"expected 5 tab-separated fields, got {len(fields)}", line_number)
        sample_id, image, report, flags, split = fields
        if len(flags) != len(LABEL_NAMES) or set(flags) - {"0", "1"}:
            raise ManifestParseError(f"label flags must be {len(LABEL_NAMES)} characters of 0/1", line_number)
        if split not in SPLITS:
            raise ManifestParseError(f"unknown split tag '{split}'", line_number)
        records.append(
            SampleRecord(sample_id, image, _unescape(report, line_number), tuple(c == "1" for c in flags), split)
        )
    return Manifest(records=records, metadata=metadata)


def load_image(path: Union[str, Path], size: Optional[int] = None) -> torch.Tensor:
    """C x H x W float32 tensor; .npy grids as stored, 8-bit images scaled to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix == ".npy":
        array = np.load(path).astype(np.float32)
    else:
        array = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise InvalidParameterError(f"{path}: expected a 2-D or C x H x W grid, got shape {array.shape}")
    image = torch.from_numpy(np.ascontiguousarray(array))
    if size is not None and tuple(image.shape[1:]) != (size, size):
        image = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return image


class ReportDataset(Dataset):
    """Records of one split, loaded once and kept in memory."""

    def __init__(
        self,
        records: Sequence[SampleRecord],
        root: Union[str, Path],
        vocab: Vocabulary,
        image_size: Optional[int] = None,
    ):
        self.records = list(records)
        self.root = Path(root)
        self.vocab = vocab
        self.image_size = image_size
        self._images: Dict[str, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    def image(self, record: SampleRecord) -> torch.Tensor:
        if record.id not in self._images:
            self._images[record.id] = load_image(self.root / record.image, self.image_size)
        return self._images[record.id]

    def __getitem__(self, index: int) -> Dict:
        record = self.records[index]
        return {
            "id": record.id,
            "image": self.image(record),
            "report_ids": torch.tensor(self.vocab.encode(record.report, add_eos=True), dtype=torch.long),
            "labels": torch.tensor(record.labels, dtype=torch.bool),
        }


def collate_reports(batch: List[Dict]) -> Dict:
    ids = [item["report_ids"] for item in batch]
    return {
        "ids": [item["id"] for item in batch],
        "images": torch.stack([item["image"] for item in batch]),
        "report_ids": pad_sequence(ids, batch_first=True, padding_value=PAD_ID),
        "lengths": torch.tensor([len(x) for x in ids], dtype=torch.long),
        "labels": torch.stack([item["labels"] for item in batch]),
    }


def linear_probe_accuracy(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: Optional[np.ndarray] = None,
    test_labels: Optional[np.ndarray] = None,
    ridge: float = 1.0,
) -> float:
    """Bag-of-pixels ridge classifier; accuracy on the test set (training set when none is given)."""

    def features(images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return np.hstack([flat, np.ones((len(flat), 1))])

    x = features(train_images)
    y = np.where(np.asarray(train_labels, dtype=bool), 1.0, -1.0)
    augmented = np.vstack([x, math.sqrt(ridge) * np.eye(x.shape[1])])
    weights, *_ = np.linalg.lstsq(augmented, np.concatenate([y, np.zeros(x.shape[1])]), rcond=None)
    if test_images is None:
        test_images, test_labels = train_images, train_labels
    predictions = features(test_images) @ weights > 0
    return float(np.mean(predictions == np.asarray(test_labels, dtype=bool)))

