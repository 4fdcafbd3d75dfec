"""Dataset ingestion and desk-scale synthetic sEMG generation.

On-disk layout
--------------
A dataset is a directory holding a ``manifest.json`` plus one binary file per
trial. The manifest schema::

    {
      "version": 1,
      "provenance": "real" | "synthetic",
      "sample_rate_hz": 4000,
      "subjects": [1, 2, ...],
      "gestures": ["HC", "T", ...],          # fixed 10-label order
      "trials_per_gesture": 6,
      "files": {"<subject>": {"<gesture label>": ["rel/path", ...]}},
      "seed": 1234                            # synthetic datasets only
    }

Trial files are self-describing binaries: a 32-byte header (magic ``SEMG``,
format version, sample count S, channel count C, sample rate — all
little-endian uint32, zero-padded to 32 bytes) followed by S*C little-endian
float32 samples, time-major. Round-trips are exact. A CSV import shim
(two numeric columns, no header, one row per sample) covers recordings
delivered as text.

Synthetic trials follow a controllable signal model: for gesture g and
channel c the signal is ``sin(2*pi*f[g,c]*t + phase) * envelope[g,c](t) *
subject_gain[c] + N(0, noise**2)``, with the phase jittered per trial and all
draws taken from named per-trial RNG streams so generation is byte-identical
across re-runs and insensitive to generation order. Per-subject gain/noise
variation plus optional shift knobs (channel gain skew, channel swap,
envelope time shift) stand in for the anatomy/impedance differences that make
a new user look out-of-distribution.
"""

from __future__ import annotations

import json
import struct
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, OutputDirError, TrialFormatError
from .seeding import derive_rng

GESTURE_LABELS = ("HC", "T", "I", "M", "R", "L", "T-I", "T-M", "T-R", "T-L")
N_CLASSES = len(GESTURE_LABELS)
TRIAL_SECONDS = 5
TRIAL_MAGIC = b"SEMG"
TRIAL_FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER_SIZE = 32


@dataclass(frozen=True)
class Trial:
    """One 5-second, 2-channel recording with its identity."""

    samples: np.ndarray  # (S, C) float32, arbitrary voltage units
    subject_id: int
    gesture: int  # 0..9, index into GESTURE_LABELS
    trial_index: int  # 1..6
    sample_rate_hz: int

    def validate(self) -> None:
        ident = (self.subject_id, self.gesture, self.trial_index)
        s, c = self.samples.shape
        if c != 2:
            raise TrialFormatError(f"trial {ident}: expected 2 channels, got {c}")
        if s != TRIAL_SECONDS * self.sample_rate_hz:
            raise TrialFormatError(
                f"trial {ident}: {s} samples != {TRIAL_SECONDS}s * {self.sample_rate_hz}Hz"
            )
        if not (0 <= self.gesture < N_CLASSES):
            raise TrialFormatError(f"trial {ident}: gesture out of range")
        if not (1 <= self.trial_index <= 6):
            raise TrialFormatError(f"trial {ident}: trial index out of range")
        if not np.all(np.isfinite(self.samples)):
            raise TrialFormatError(f"trial {ident}: non-finite samples")


@dataclass(frozen=True)
class TrialHandle:
    """Lazily loadable reference to a validated on-disk trial."""

    path: Path
    subject_id: int
    gesture: int
    trial_index: int
    sample_rate_hz: int

    def load(self) -> Trial:
        trial = read_trial(
            self.path, self.subject_id, self.gesture, self.trial_index
        )
        if trial.sample_rate_hz != self.sample_rate_hz:
            raise TrialFormatError(
                f"trial {(self.subject_id, self.gesture, self.trial_index)}: "
                f"rate {trial.sample_rate_hz} != manifest rate {self.sample_rate_hz}"
            )
        return trial


@dataclass
class DatasetManifest:
    """Resolved dataset: metadata plus a handle for every declared trial."""

    root: Path
    provenance: str
    sample_rate_hz: int
    subjects: list[int]
    gestures: tuple[str, ...]
    trials_per_gesture: int
    handles: dict[tuple[int, int, int], TrialHandle]
    seed: int | None = None
    generator_spec: dict | None = None

    def trial(self, subject: int, gesture: int, trial_index: int) -> Trial:
        return self.handles[(subject, gesture, trial_index)].load()

    def handle(self, subject: int, gesture: int, trial_index: int) -> TrialHandle:
        return self.handles[(subject, gesture, trial_index)]

    @property
    def n_trials(self) -> int:
        return len(self.handles)


# ---------------------------------------------------------------------------
# Binary trial format
# ---------------------------------------------------------------------------

def write_trial(trial: Trial, path: Path) -> None:
    """Write the 32-byte header + float32 payload; exact round-trip."""
    samples = np.ascontiguousarray(trial.samples, dtype="<f4")
    s, c = samples.shape
    header = struct.pack(
        "<4sIIII", TRIAL_MAGIC, TRIAL_FORMAT_VERSION, s, c, trial.sample_rate_hz
    )
    header += b"\x00" * (_HEADER_SIZE - len(header))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.tobytes())


def read_trial(path: Path, subject_id: int, gesture: int, trial_index: int) -> Trial:
    ident = (subject_id, gesture, trial_index)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ManifestError(f"trial {ident}: cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER_SIZE:
        raise TrialFormatError(f"trial {ident}: truncated header in {path}")
    magic, version, s, c, rate = struct.unpack("<4sIIII", raw[:20])
    if magic != TRIAL_MAGIC:
        raise TrialFormatError(f"trial {ident}: bad magic in {path}")
    if version != TRIAL_FORMAT_VERSION:
        raise TrialFormatError(f"trial {ident}: unsupported format version {version}")
    payload = raw[_HEADER_SIZE:]
    if len(payload) != 4 * s * c:
        raise TrialFormatError(
            f"trial {ident}: payload is {len(payload)} bytes, expected {4 * s * c}"
        )
    samples = np.frombuffer(payload, dtype="<f4").reshape(s, c)
    trial = Trial(
        samples=samples,
        subject_id=subject_id,
        gesture=gesture,
        trial_index=trial_index,
        sample_rate_hz=rate,
    )
    trial.validate()
    return trial


def read_trial_csv(
    path: Path, subject_id: int, gesture: int, trial_index: int, sample_rate_hz: int
) -> Trial:
    """Import shim for text recordings: two numeric columns, no header."""
    ident = (subject_id, gesture, trial_index)
    try:
        samples = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise TrialFormatError(f"trial {ident}: cannot parse CSV {path}: {exc}") from exc
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise TrialFormatError(
            f"trial {ident}: CSV has {samples.shape[1] if samples.ndim == 2 else 1} "
            "columns, expected 2"
        )
    trial = Trial(
        samples=samples.astype(np.float32),
        subject_id=subject_id,
        gesture=gesture,
        trial_index=trial_index,
        sample_rate_hz=sample_rate_hz,
    )
    trial.validate()
    return trial


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _trial_filename(subject: int, gesture: int, trial_index: int) -> str:
    return f"trials/s{subject:02d}_g{gesture}_t{trial_index}.semg"


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    files: dict[str, dict[str, list[str]]] = {}
    for subject in manifest.subjects:
        per_gesture: dict[str, list[str]] = {}
        for g, label in enumerate(manifest.gestures):
            per_gesture[label] = [
                str(manifest.handles[(subject, g, t)].path.relative_to(manifest.root))
                for t in range(1, manifest.trials_per_gesture + 1)
            ]
        files[str(subject)] = per_gesture
    doc = {
        "version": MANIFEST_VERSION,
        "provenance": manifest.provenance,
        "sample_rate_hz": manifest.sample_rate_hz,
        "subjects": manifest.subjects,
        "gestures": list(manifest.gestures),
        "trials_per_gesture": manifest.trials_per_gesture,
        "files": files,
    }
    if manifest.seed is not None:
        doc["seed"] = manifest.seed
    if manifest.generator_spec is not None:
        doc["generator_spec"] = manifest.generator_spec
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_dataset(manifest_path: Path, validate: str = "full") -> DatasetManifest:
    """Load and validate a dataset manifest.

    Parameters
    ----------
    manifest_path:
        Path to ``manifest.json``.
    validate:
        ``"full"`` reads every trial payload (shape, rate, finiteness);
        ``"headers"`` only checks that declared files exist and their
        headers match the manifest.

    Raises
    ------
    ManifestError
        Missing/malformed manifest or missing trial file.
    TrialFormatError
        A trial violates the trial contract; the error names the offending
        (subject, gesture, trial).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc

    required = {
        "version", "provenance", "sample_rate_hz", "subjects", "gestures",
        "trials_per_gesture", "files",
    }
    missing = required - doc.keys()
    if missing:
        raise ManifestError(f"manifest missing fields: {sorted(missing)}")
    if tuple(doc["gestures"]) != GESTURE_LABELS:
        raise ManifestError(
            f"manifest gesture labels {doc['gestures']} do not match the "
            f"fixed 10-class order {list(GESTURE_LABELS)}"
        )

    root = manifest_path.parent
    subjects = [int(s) for s in doc["subjects"]]
    trials_per_gesture = int(doc["trials_per_gesture"])
    rate = int(doc["sample_rate_hz"])
    handles: dict[tuple[int, int, int], TrialHandle] = {}
    for subject in subjects:
        per_gesture = doc["files"].get(str(subject))
        if per_gesture is None:
            raise ManifestError(f"manifest lists no files for subject {subject}")
        for g, label in enumerate(GESTURE_LABELS):
            paths = per_gesture.get(label)
            if paths is None or len(paths) != trials_per_gesture:
                raise ManifestError(
                    f"subject {subject} gesture {label}: expected "
                    f"{trials_per_gesture} trials, got {0 if paths is None else len(paths)}"
                )
            for t, rel in enumerate(paths, start=1):
                trial_path = root / rel
                if not trial_path.is_file():
                    raise ManifestError(
                        f"trial ({subject}, {g}, {t}): file missing: {trial_path}"
                    )
                handles[(subject, g, t)] = TrialHandle(
                    path=trial_path,
                    subject_id=subject,
                    gesture=g,
                    trial_index=t,
                    sample_rate_hz=rate,
                )

    manifest = DatasetManifest(
        root=root,
        provenance=str(doc["provenance"]),
        sample_rate_hz=rate,
        subjects=subjects,
        gestures=GESTURE_LABELS,
        trials_per_gesture=trials_per_gesture,
        handles=handles,
        seed=doc.get("seed"),
        generator_spec=doc.get("generator_spec"),
    )
    if validate == "full":
        for handle in manifest.handles.values():
            handle.load()
    return manifest


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _default_carriers() -> np.ndarray:
    # Distinct per-class frequency pairs inside a plausible 35-170 Hz band.
    g = np.arange(N_CLASSES, dtype=np.float64)
    return np.stack([40.0 + 12.0 * g, 166.0 - 11.0 * g], axis=1)


def _default_levels() -> np.ndarray:
    # Per-(class, channel) envelope amplitudes on a multiplicative grid so the
    # 10 classes form a well-spread constellation in per-channel-RMS space.
    lo = 0.55 * 1.5 ** np.arange(5, dtype=np.float64)
    hi = np.array([0.6, 1.56])
    g = np.arange(N_CLASSES)
    return np.stack([lo[g % 5], hi[g // 5]], axis=1)


@dataclass(frozen=True)
class SyntheticSpec:
    """Full recipe for a deterministic synthetic dataset."""

    n_subjects: int = 8
    master_seed: int = 20260819
    sample_rate_hz: int = 4000
    trials_per_gesture: int = 6
    carrier_freqs_hz: np.ndarray = field(default_factory=_default_carriers)  # (10, 2)
    envelope_levels: np.ndarray = field(default_factory=_default_levels)  # (10, 2)
    subject_gain_spread: float = 0.15  # per-channel gain ~ U[1-s, 1+s]
    noise_floor: float = 0.05
    # Domain-shift knobs, applied only to the listed subjects: they emulate a
    # novel user whose electrode placement/impedance breaks direct transfer.
    shift_subjects: tuple[int, ...] = ()
    shift_gain_skew: tuple[float, float] = (1.0, 1.0)
    shift_channel_swap: bool = False
    shift_envelope_shift_s: float = 0.0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.carrier_freqs_hz.shape != (N_CLASSES, 2):
            raise ValueError("carrier_freqs_hz must be (10, 2)")
        if self.envelope_levels.shape != (N_CLASSES, 2):
            raise ValueError("envelope_levels must be (10, 2)")
        if np.any(self.envelope_levels <= 0):
            raise ValueError("envelope levels must be positive")
        # No two classes may share both the carrier pair and the level pair.
        signatures = {
            (tuple(self.carrier_freqs_hz[g]), tuple(self.envelope_levels[g]))
            for g in range(N_CLASSES)
        }
        if len(signatures) != N_CLASSES:
            raise ValueError("class signatures are not pairwise distinct")

    def to_json(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "master_seed": self.master_seed,
            "sample_rate_hz": self.sample_rate_hz,
            "trials_per_gesture": self.trials_per_gesture,
            "carrier_freqs_hz": self.carrier_freqs_hz.tolist(),
            "envelope_levels": self.envelope_levels.tolist(),
            "subject_gain_spread": self.subject_gain_spread,
            "noise_floor": self.noise_floor,
            "shift_subjects": list(self.shift_subjects),
            "shift_gain_skew": list(self.shift_gain_skew),
            "shift_channel_swap": self.shift_channel_swap,
            "shift_envelope_shift_s": self.shift_envelope_shift_s,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        kwargs = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "carrier_freqs_hz" in kwargs:
            kwargs["carrier_freqs_hz"] = np.asarray(kwargs["carrier_freqs_hz"], dtype=np.float64)
        if "envelope_levels" in kwargs:
            kwargs["envelope_levels"] = np.asarray(kwargs["envelope_levels"], dtype=np.float64)
        if "shift_subjects" in kwargs:
            kwargs["shift_subjects"] = tuple(int(s) for s in kwargs["shift_subjects"])
        if "shift_gain_skew" in kwargs:
            kwargs["shift_gain_skew"] = tuple(float(g) for g in kwargs["shift_gain_skew"])
        spec = cls(**kwargs)
        spec.validate()
        return spec

    def with_shift(
        self,
        subjects: tuple[int, ...],
        gain_skew: tuple[float, float] = (1.6, 0.55),
        channel_swap: bool = True,
        envelope_shift_s: float = 0.4,
    ) -> "SyntheticSpec":
        """Copy of this spec with domain-shift knobs enabled for `subjects`."""
        return replace(
            self,
            shift_subjects=tuple(subjects),
            shift_gain_skew=gain_skew,
            shift_channel_swap=channel_swap,
            shift_envelope_shift_s=envelope_shift_s,
        )


def _envelope_shape(gesture: int, t_frac: np.ndarray) -> np.ndarray:
    """Class-specific piecewise-linear hold profile, normalized to unit RMS."""
    attack = 0.06 + 0.05 * (gesture % 3)
    release = 0.72 - 0.04 * (gesture % 4)
    mid = 1.0 + 0.12 * ((gesture % 5) - 2) / 2.0  # slight mid-hold sag/bulge
    breaks = np.array([0.0, attack, 0.5, release, 1.0])
    amps = np.array([0.15, 1.0, mid, 1.0, 0.3])
    env = np.interp(t_frac, breaks, amps)
    rms = np.sqrt(np.mean(env**2))
    return env / rms


def synthesize_trial(spec: SyntheticSpec, subject: int, gesture: int, trial_index: int) -> Trial:
    """Render one trial from its own named RNG stream (order-independent)."""
    s_total = TRIAL_SECONDS * spec.sample_rate_hz
    t = np.arange(s_total, dtype=np.float64) / spec.sample_rate_hz
    t_frac = t / (TRIAL_SECONDS)

    subj_rng = derive_rng(spec.master_seed, "subject", subject)
    gains = 1.0 + spec.subject_gain_spread * subj_rng.uniform(-1.0, 1.0, size=2)
    noise_scale = spec.noise_floor * subj_rng.uniform(0.75, 1.25)

    shifted = subject in spec.shift_subjects
    if shifted:
        gains = gains * np.asarray(spec.shift_gain_skew, dtype=np.float64)

    trial_rng = derive_rng(spec.master_seed, "trial", subject, gesture, trial_index)
    phases = trial_rng.uniform(0.0, 2.0 * np.pi, size=2)

    env = _envelope_shape(gesture, t_frac)
    if shifted and spec.shift_envelope_shift_s != 0.0:
        shift_n = int(round(spec.shift_envelope_shift_s * spec.sample_rate_hz))
        env = np.roll(env, shift_n)

    channels = []
    for c in range(2):
        carrier = np.sin(2.0 * np.pi * spec.carrier_freqs_hz[gesture, c] * t + phases[c])
        level = spec.envelope_levels[gesture, c]
        clean = carrier * env * level * gains[c]
        noise = trial_rng.normal(0.0, noise_scale, size=s_total)
        channels.append(clean + noise)
    samples = np.stack(channels, axis=1).astype(np.float32)

    if shifted and spec.shift_channel_swap:
        samples = samples[:, ::-1].copy()

    return Trial(
        samples=samples,
        subject_id=subject,
        gesture=gesture,
        trial_index=trial_index,
        sample_rate_hz=spec.sample_rate_hz,
    )


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> DatasetManifest:
    """Emit every trial plus the manifest; byte-identical for equal specs.

    Raises OutputDirError if `out_dir` exists and is non-empty.
    """
    spec.validate()
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise OutputDirError(f"output directory is not empty: {out_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    subjects = list(range(1, spec.n_subjects + 1))
    handles: dict[tuple[int, int, int], TrialHandle] = {}
    for subject in subjects:
        for gesture in range(N_CLASSES):
            for trial_index in range(1, spec.trials_per_gesture + 1):
                trial = synthesize_trial(spec, subject, gesture, trial_index)
                path = out_dir / _trial_filename(subject, gesture, trial_index)
                write_trial(trial, path)
                handles[(subject, gesture, trial_index)] = TrialHandle(
                    path=path,
                    subject_id=subject,
                    gesture=gesture,
                    trial_index=trial_index,
                    sample_rate_hz=spec.sample_rate_hz,
                )

    manifest = DatasetManifest(
        root=out_dir,
        provenance="synthetic",
        sample_rate_hz=spec.sample_rate_hz,
        subjects=subjects,
        gestures=GESTURE_LABELS,
        trials_per_gesture=spec.trials_per_gesture,
        handles=handles,
        seed=spec.master_seed,
        generator_spec=spec.to_json(),
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def ingest_csv_dataset(
    listing_path: Path, out_dir: Path, sample_rate_hz: int | None = None
) -> DatasetManifest:
    """Convert a CSV listing into the binary layout.

    The listing is a JSON document shaped like the manifest `files` map but
    pointing at CSV files (paths relative to the listing), plus
    `sample_rate_hz` and `subjects`/`trials_per_gesture`.
    """
    listing_path = Path(listing_path)
    if not listing_path.is_file():
        raise ManifestError(f"listing not found: {listing_path}")
    doc = json.loads(listing_path.read_text())
    rate = int(sample_rate_hz or doc.get("sample_rate_hz", 0))
    if rate <= 0:
        raise ManifestError("listing must declare sample_rate_hz")
    subjects = [int(s) for s in doc["subjects"]]
    trials_per_gesture = int(doc.get("trials_per_gesture", 6))
    src_root = listing_path.parent

    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise OutputDirError(f"output directory is not empty: {out_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    handles: dict[tuple[int, int, int], TrialHandle] = {}
    for subject in subjects:
        per_gesture = doc["files"][str(subject)]
        for g, label in enumerate(GESTURE_LABELS):
            for t, rel in enumerate(per_gesture[label], start=1):
                trial = read_trial_csv(src_root / rel, subject, g, t, rate)
                path = out_dir / _trial_filename(subject, g, t)
                write_trial(trial, path)
                handles[(subject, g, t)] = TrialHandle(
                    path=path, subject_id=subject, gesture=g,
                    trial_index=t, sample_rate_hz=rate,
                )

    manifest = DatasetManifest(
        root=out_dir,
        provenance="real",
        sample_rate_hz=rate,
        subjects=subjects,
        gestures=GESTURE_LABELS,
        trials_per_gesture=trials_per_gesture,
        handles=handles,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# Separability oracle
# ---------------------------------------------------------------------------

def rms_centroid_accuracy(
    manifest: DatasetManifest,
    train_trials: tuple[int, ...] = (1, 2, 3, 4),
    test_trials: tuple[int, ...] = (6,),
) -> float:
    """Nearest-centroid accuracy on per-channel trial RMS features.

    A deliberately crude classifier: if even this clears a high bar, the
    class structure is strong enough for deep-model targets to be meaningful.
    """
    feats: dict[int, list[np.ndarray]] = {g: [] for g in range(N_CLASSES)}
    test_set: list[tuple[np.ndarray, int]] = []
    for (subject, gesture, trial_index), handle in manifest.handles.items():
        if trial_index in train_trials or trial_index in test_trials:
            x = handle.load().samples.astype(np.float64)
            rms = np.sqrt(np.mean(x**2, axis=0))
            if trial_index in train_trials:
                feats[gesture].append(rms)
            if trial_index in test_trials:
                test_set.append((rms, gesture))
    centroids = np.stack([np.mean(feats[g], axis=0) for g in range(N_CLASSES)])
    correct = sum(
        int(np.argmin(np.sum((centroids - rms) ** 2, axis=1)) == gesture)
        for rms, gesture in test_set
    )
    return correct / len(test_set)
