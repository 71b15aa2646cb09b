"""Storage service for frames, annotations, density rasters, models and reports."""
import csv
import io
import json
import logging
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.exceptions import ConfigError, DataFormatError
from app.models import (
    Annotation,
    ArrayModel,
    BBox,
    DatasetManifest,
    DensityMap,
    EvalResult,
    ExperimentConfig,
    Frame,
    FrameEntry,
    ModelHeader,
    Roi,
    SceneConfig,
    WeightMatrix,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ANNOTATION_HEADER = ["frame_id", "x0", "y0", "x1", "y1"]
DENSITY_MAGIC = b"DMAP"
FEATURE_MAGIC = b"FEAT"
WEIGHT_MAGIC = b"WMAT"
_U32_MAX = 2**32 - 1

# P5 header: magic, width, height, maxval, each separated by whitespace or comments
_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


class Dataset(ArrayModel):
    """A manifest together with the frames and annotations it names."""
    manifest: DatasetManifest
    frame_ids: Tuple[str, ...]
    frames: Tuple[Frame, ...]
    annotations: Tuple[Annotation, ...]
    background: Frame
    roi: Roi


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write to a temporary file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _report_bytes(lines: Sequence[str], config_hash: Optional[str]) -> bytes:
    """CSV text, preceded by a `# config_hash=...` comment line when a hash is given."""
    if config_hash is not None:
        lines = [f"# config_hash={config_hash}", *lines]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _canonical_json(payload) -> bytes:
    return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")


class StorageService:
    """Binary and text formats shared by every stage of the pipeline."""

    # ------------------------------------------------------------------
    # Frames (binary PGM, P5, maxval 255)
    # ------------------------------------------------------------------

    def decode_frame(self, data: bytes) -> Frame:
        pos = 0
        tokens = []
        for _ in range(4):
            match = _PGM_TOKEN.match(data, pos)
            if match is None:
                raise DataFormatError("malformed PGM header")
            tokens.append(match.group(1))
            pos = match.end()
        magic, width_tok, height_tok, maxval_tok = tokens
        if magic != b"P5":
            raise DataFormatError("malformed PGM header: expected magic P5")
        try:
            width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
        except ValueError:
            raise DataFormatError("malformed PGM header: non-numeric field")
        if width < 1 or height < 1:
            raise DataFormatError("malformed PGM header: empty raster")
        if maxval != 255:
            raise DataFormatError(f"unsupported maxval {maxval}, expected 255")
        # exactly one whitespace byte separates the header from the payload
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise DataFormatError("unexpected end of data")
        pos += 1
        expected = width * height
        payload = data[pos:pos + expected]
        if len(payload) < expected:
            raise DataFormatError("unexpected end of data")
        if len(data) > pos + expected:
            raise DataFormatError("trailing data after pixel payload")
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
        return Frame(width=width, height=height, pixels=pixels, header=bytes(data[:pos]))

    def encode_frame(self, frame: Frame) -> bytes:
        header = frame.header
        if header is None:
            header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
        return header + frame.pixels.tobytes(order="C")

    def load_frame(self, path: PathLike) -> Frame:
        """Load a binary PGM frame."""
        return self.decode_frame(Path(path).read_bytes())

    def save_frame(self, frame: Frame, path: PathLike) -> None:
        atomic_write(path, self.encode_frame(frame))

    # ------------------------------------------------------------------
    # Annotations (CSV: frame_id,x0,y0,x1,y1)
    # ------------------------------------------------------------------

    def parse_annotations(self, text: str) -> List[Annotation]:
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise DataFormatError(f"unknown header {header!r}, expected {','.join(ANNOTATION_HEADER)}")

        grouped: Dict[str, List[BBox]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 5:
                raise DataFormatError(f"line {line_no}: expected 5 fields, got {len(row)}")
            frame_id = row[0].strip()
            try:
                x0, y0, x1, y1 = (int(cell.strip()) for cell in row[1:])
            except ValueError:
                raise DataFormatError(f"line {line_no}: non-integer coordinate in {row!r}")
            if x1 <= x0 or y1 <= y0:
                raise DataFormatError(f"line {line_no}: degenerate box {row!r}")
            grouped.setdefault(frame_id, []).append(BBox(x0=x0, y0=y0, x1=x1, y1=y1))

        return [Annotation(frame_id=fid, boxes=tuple(boxes)) for fid, boxes in grouped.items()]

    def load_annotations(self, path: PathLike) -> List[Annotation]:
        """Load box annotations grouped by frame, preserving file order."""
        return self.parse_annotations(Path(path).read_text(encoding="utf-8"))

    def save_annotations(self, annotations: Iterable[Annotation], path: PathLike) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for annotation in annotations:
            for box in annotation.boxes:
                writer.writerow([annotation.frame_id, box.x0, box.y0, box.x1, box.y1])
        atomic_write(path, buffer.getvalue().encode("utf-8"))

    # ------------------------------------------------------------------
    # Density rasters: DMAP, width u32, height u32, 4 reserved bytes, f64 LE
    # ------------------------------------------------------------------

    def encode_density(self, density: DensityMap) -> bytes:
        if density.width > _U32_MAX or density.height > _U32_MAX:
            raise DataFormatError("dimension overflow: width and height must fit in 32 bits")
        header = DENSITY_MAGIC + struct.pack("<III", density.width, density.height, 0)
        return header + density.values.astype("<f8").tobytes(order="C")

    def decode_density(self, data: bytes) -> DensityMap:
        if len(data) < 16 or data[:4] != DENSITY_MAGIC:
            raise DataFormatError("not a density file")
        width, height, _reserved = struct.unpack("<III", data[4:16])
        expected = 16 + 8 * width * height
        if len(data) < expected:
            raise DataFormatError("unexpected end of data")
        if len(data) > expected:
            raise DataFormatError("trailing data after density payload")
        values = np.frombuffer(data, dtype="<f8", offset=16).reshape(height, width)
        try:
            return DensityMap(width=width, height=height, values=values)
        except ValidationError as exc:
            raise DataFormatError(f"invalid density values: {exc.errors()[0]['msg']}")

    def save_density(self, density: DensityMap, path: PathLike) -> None:
        atomic_write(path, self.encode_density(density))

    def load_density(self, path: PathLike) -> DensityMap:
        return self.decode_density(Path(path).read_bytes())

    # ------------------------------------------------------------------
    # Feature cache: FEAT, N, J, K as u32 LE, then N*J*K f64 LE
    # ------------------------------------------------------------------

    def save_features(self, stack: np.ndarray, path: PathLike) -> None:
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim != 3:
            raise DataFormatError("feature stack must be (N, J, K)")
        if max(stack.shape) > _U32_MAX:
            raise DataFormatError("dimension overflow in feature stack")
        header = FEATURE_MAGIC + struct.pack("<III", *stack.shape)
        atomic_write(path, header + stack.astype("<f8").tobytes(order="C"))

    def load_features(self, path: PathLike) -> np.ndarray:
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:4] != FEATURE_MAGIC:
            raise DataFormatError("not a feature cache file")
        n, j, k = struct.unpack("<III", data[4:16])
        if len(data) != 16 + 8 * n * j * k:
            raise DataFormatError("unexpected end of data")
        return np.frombuffer(data, dtype="<f8", offset=16).reshape(n, j, k).astype(np.float64)

    # ------------------------------------------------------------------
    # Model file: one JSON header line, WMAT, K*J f64 LE (row-major)
    # ------------------------------------------------------------------

    def encode_model(self, header: ModelHeader, weights: WeightMatrix) -> bytes:
        if (weights.K, weights.J) != (header.K, header.J):
            raise DataFormatError("weight matrix shape does not match the header")
        head = json.dumps(header.model_dump(mode="json"), sort_keys=True,
                          separators=(",", ":")).encode("utf-8") + b"\n"
        return head + WEIGHT_MAGIC + weights.data.astype("<f8").tobytes(order="C")

    def decode_model(self, data: bytes) -> Tuple[ModelHeader, WeightMatrix]:
        newline = data.find(b"\n")
        if newline < 0:
            raise DataFormatError("model file has no header line")
        try:
            header = ModelHeader.model_validate_json(data[:newline])
        except ValidationError as exc:
            raise DataFormatError(f"invalid model header: {exc}")
        body = data[newline + 1:]
        if body[:4] != WEIGHT_MAGIC:
            raise DataFormatError("model file is missing the WMAT block")
        if len(body) != 4 + 8 * header.K * header.J:
            raise DataFormatError("unexpected end of data")
        values = np.frombuffer(body, dtype="<f8", offset=4).reshape(header.K, header.J)
        return header, WeightMatrix(data=values)

    def save_model(self, header: ModelHeader, weights: WeightMatrix, path: PathLike) -> None:
        atomic_write(path, self.encode_model(header, weights))

    def load_model(self, path: PathLike) -> Tuple[ModelHeader, WeightMatrix]:
        return self.decode_model(Path(path).read_bytes())

    # ------------------------------------------------------------------
    # Configurations and manifests (JSON)
    # ------------------------------------------------------------------

    def load_scene_config(self, path: PathLike) -> SceneConfig:
        try:
            return SceneConfig.model_validate_json(Path(path).read_bytes())
        except ValidationError as exc:
            raise ConfigError(f"invalid scene config {path}: {exc}")

    def save_scene_config(self, config: SceneConfig, path: PathLike) -> None:
        atomic_write(path, _canonical_json(config.model_dump(mode="json")))

    def load_experiment_config(self, path: PathLike) -> ExperimentConfig:
        """Load an experiment config; relative dataset paths resolve against its directory."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"experiment config {path} must be a JSON object")
        for key in ("manifest", "test_manifest"):
            value = raw.get(key)
            if isinstance(value, str) and not Path(value).is_absolute():
                raw[key] = str(path.parent / value)
        try:
            return ExperimentConfig.model_validate(raw)
        except ValidationError as exc:
            raise ConfigError(f"invalid experiment config {path}: {exc}")

    def save_experiment_config(self, config: ExperimentConfig, path: PathLike) -> None:
        atomic_write(path, _canonical_json(config.model_dump(mode="json")))

    def load_manifest(self, path: PathLike) -> DatasetManifest:
        try:
            return DatasetManifest.model_validate_json(Path(path).read_bytes())
        except ValidationError as exc:
            raise ConfigError(f"invalid dataset manifest {path}: {exc}")

    def load_dataset(self, manifest_path: PathLike) -> Dataset:
        """Load every frame, the background and the annotations a manifest names."""
        manifest_path = Path(manifest_path)
        manifest = self.load_manifest(manifest_path)
        base = manifest_path.parent

        def resolve(rel: str) -> Path:
            p = Path(rel)
            return p if p.is_absolute() else base / p

        background = self.load_frame(resolve(manifest.background))
        frames = tuple(self.load_frame(resolve(entry.path)) for entry in manifest.frames)
        for entry, frame in zip(manifest.frames, frames):
            if (frame.width, frame.height) != (background.width, background.height):
                raise DataFormatError(f"frame {entry.frame_id} does not match the background size")

        by_id = {a.frame_id: a for a in self.load_annotations(resolve(manifest.annotations))}
        frame_ids = tuple(entry.frame_id for entry in manifest.frames)
        unknown = set(by_id) - set(frame_ids)
        if unknown:
            raise DataFormatError(f"annotations reference unknown frames: {sorted(unknown)[:5]}")
        annotations = tuple(by_id.get(fid, Annotation(frame_id=fid)) for fid in frame_ids)

        roi = manifest.roi_model
        roi.check_within(background.width, background.height)
        logger.info(f"Loaded dataset {manifest_path} with {len(frames)} frames")
        return Dataset(
            manifest=manifest,
            frame_ids=frame_ids,
            frames=frames,
            annotations=annotations,
            background=background,
            roi=roi,
        )

    def write_dataset(
        self,
        out_dir: PathLike,
        background: Frame,
        frames: Sequence[Frame],
        annotations: Sequence[Annotation],
        roi: Roi,
        scene_hash: Optional[str] = None,
    ) -> Path:
        """Write frames, background, annotations and a manifest; return the manifest path."""
        out_dir = Path(out_dir)
        entries = []
        self.save_frame(background, out_dir / "background.pgm")
        for frame, annotation in zip(frames, annotations):
            rel = f"frames/{annotation.frame_id}.pgm"
            self.save_frame(frame, out_dir / rel)
            entries.append(FrameEntry(frame_id=annotation.frame_id, path=rel))
        self.save_annotations(annotations, out_dir / "annotations.csv")
        manifest = DatasetManifest(
            frames=entries,
            annotations="annotations.csv",
            background="background.pgm",
            roi=roi.rect,
            region_length=roi.region_length,
            scene_hash=scene_hash,
        )
        manifest_path = out_dir / "manifest.json"
        atomic_write(manifest_path, _canonical_json(manifest.model_dump(mode="json")))
        return manifest_path

    # ------------------------------------------------------------------
    # Logs and reports
    # ------------------------------------------------------------------

    def write_training_log(self, traces: Sequence[Sequence[float]], path: PathLike,
                           config_hash: Optional[str] = None) -> None:
        lines = ["iter,restart,objective"]
        for restart, trace in enumerate(traces):
            lines.extend(f"{it},{restart},{float(value)!r}" for it, value in enumerate(trace))
        atomic_write(path, _report_bytes(lines, config_hash))

    def write_eval_report(self, result: EvalResult, out_dir: PathLike,
                          config_hash: Optional[str] = None) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        lines = ["frame_id,true_count,est_count,abs_err"]
        for frame_id, true_count, est_count in result.per_frame:
            lines.append(f"{frame_id},{float(true_count)!r},{float(est_count)!r},{abs(float(est_count) - float(true_count))!r}")
        csv_path = out_dir / "eval_frames.csv"
        json_path = out_dir / "eval_summary.json"
        atomic_write(csv_path, _report_bytes(lines, config_hash))
        summary = {
            "mae": result.mae,
            "mse": result.mse,
            "ara": result.ara,
            "n_frames": len(result.per_frame),
            "config_hash": config_hash,
        }
        atomic_write(json_path, _canonical_json(summary))
        return csv_path, json_path

    def write_predictions(self, rows: Sequence[Tuple[str, float, float, float]], path: PathLike,
                          config_hash: Optional[str] = None) -> None:
        lines = ["frame_id,raw_count,count,traffic_density"]
        lines.extend(f"{fid},{float(raw)!r},{float(count)!r},{float(dens)!r}" for fid, raw, count, dens in rows)
        atomic_write(path, _report_bytes(lines, config_hash))


# Global instance
storage_service = StorageService()
