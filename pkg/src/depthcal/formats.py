"""File formats: depth PGM, corner CSV, manifests, calibration files, PLY.

Text formats are line-oriented `key value...` with `#` comments, UTF-8 and
'.' decimal separators. Floats are written with 17 significant digits so
every serialization round-trips exactly. Writes go to a temp file in the
target directory and are renamed into place, so readers never see partial
files.

Depth PGM: binary P5, maxval 65535, 16-bit big-endian samples holding
millimeters; 0 marks an invalid pixel. Values convert to meters on load.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .calib_undistort import BoardSpec, Frame
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    OrganizedCloud,
    RigidTransform,
)
from .maps import GlobalMap, PolyFn, UndistortionMap

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed files."""


def _fmt(x):
    return format(float(x), ".17g")


def _atomic_write_bytes(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_depthcal_")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))


def _read_keyvals(path):
    """Parse a key-value text file into an ordered list of (key, tokens)."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            out.append((tokens[0], tokens[1:]))
    return out


# ---------------------------------------------------------------------------
# depth PGM


def write_depth_pgm(path, img: DepthImage):
    """16-bit binary PGM, millimeters, big-endian sample order."""
    mm = np.round(img.data * 1000.0)
    if np.any(mm < 0) or np.any(mm > 65535):
        raise FormatError("depth out of the 16-bit millimeter range")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    _atomic_write_bytes(path, header + mm.astype(">u2").tobytes())


def read_depth_pgm(path) -> DepthImage:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 65535:
        raise FormatError(f"{path}: expected maxval 65535, got {maxval}")
    expected = width * height * 2
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated PGM payload")
    mm = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return DepthImage(width, height, mm.astype(float) / 1000.0)


# ---------------------------------------------------------------------------
# corners CSV


def write_corners_csv(path, corners):
    """Corner grid (rows, cols, 2) -> `row,col,u,v` lines."""
    corners = np.asarray(corners, dtype=float)
    lines = ["row,col,u,v"]
    for r in range(corners.shape[0]):
        for c in range(corners.shape[1]):
            lines.append(f"{r},{c},{_fmt(corners[r, c, 0])},{_fmt(corners[r, c, 1])}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_corners_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "row,col,u,v":
        raise FormatError(f"{path}: expected header 'row,col,u,v'")
    entries = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}: malformed corner line {ln!r}")
        r, c = int(parts[0]), int(parts[1])
        if (r, c) in entries:
            raise FormatError(f"{path}: duplicate corner ({r}, {c})")
        entries[(r, c)] = (float(parts[2]), float(parts[3]))
    if not entries:
        raise FormatError(f"{path}: no corners")
    rows = max(r for r, _ in entries) + 1
    cols = max(c for _, c in entries) + 1
    if len(entries) != rows * cols:
        raise FormatError(f"{path}: incomplete {rows}x{cols} corner grid")
    out = np.empty((rows, cols, 2))
    for (r, c), uv in entries.items():
        out[r, c] = uv
    return out


# ---------------------------------------------------------------------------
# intrinsics / transforms as key-value tokens


def _intr_tokens(intr: CameraIntrinsics):
    vals = [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
            *intr.radial_dist, *intr.tangential_dist]
    return " ".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals)


def _intr_from_tokens(tokens):
    if len(tokens) != 11:
        raise FormatError("intrinsics line needs 11 values")
    vals = [float(t) for t in tokens]
    return CameraIntrinsics(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                            width=int(vals[4]), height=int(vals[5]),
                            radial_dist=tuple(vals[6:9]),
                            tangential_dist=tuple(vals[9:11]))


def _transform_lines(prefix, t: RigidTransform):
    q = t.quaternion
    tr = t.translation
    return [f"{prefix}_translation {_fmt(tr[0])} {_fmt(tr[1])} {_fmt(tr[2])}",
            f"{prefix}_quaternion {_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])}"]


# ---------------------------------------------------------------------------
# calibration file


def write_calibration(path, umap: UndistortionMap, gmap: GlobalMap,
                      extrinsic: RigidTransform, intr_depth: CameraIntrinsics,
                      intr_rgb: CameraIntrinsics):
    lines = [
        "# depthcal calibration",
        f"version {FORMAT_VERSION}",
        f"rgb_intrinsics {_intr_tokens(intr_rgb)}",
        f"depth_intrinsics {_intr_tokens(intr_depth)}",
        *_transform_lines("extrinsic", extrinsic),
        f"umap_size {umap.width} {umap.height}",
        f"umap_bins {umap.chi} {umap.psi}",
        f"umap_degree {umap.degree}",
    ]
    gh, gw = umap.grid_shape
    for j in range(gh):
        for i in range(gw):
            coeffs = " ".join(_fmt(c) for c in umap.coefficients[j, i])
            lines.append(f"umap_fn {i} {j} {coeffs}")
    lines.append(f"gmap_degree {gmap.degree}")
    for name, fn in (("00", gmap.corner_00), ("w0", gmap.corner_w0),
                     ("0h", gmap.corner_0h)):
        coeffs = " ".join(_fmt(c) for c in fn.coefficients)
        lines.append(f"gmap_corner_{name} {coeffs}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_calibration(path):
    """Returns (umap, gmap, extrinsic, intr_depth, intr_rgb).

    The dependent global-map corner is rebuilt from the three stored free
    corners, so the planarity constraint cannot be broken by file edits.
    """
    entries = _read_keyvals(path)
    kv = {}
    umap_fns = []
    for key, tokens in entries:
        if key == "umap_fn":
            umap_fns.append(tokens)
        else:
            kv[key] = tokens
    try:
        if int(kv["version"][0]) != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {kv['version'][0]}")
        intr_rgb = _intr_from_tokens(kv["rgb_intrinsics"])
        intr_depth = _intr_from_tokens(kv["depth_intrinsics"])
        extrinsic = RigidTransform([float(t) for t in kv["extrinsic_quaternion"]],
                                   [float(t) for t in kv["extrinsic_translation"]])
        width, height = (int(t) for t in kv["umap_size"])
        chi, psi = (int(t) for t in kv["umap_bins"])
        degree = int(kv["umap_degree"][0])
        g_degree = int(kv["gmap_degree"][0])
        corners = [PolyFn([float(t) for t in kv[f"gmap_corner_{n}"]],
                          constant_zero=True) for n in ("00", "w0", "0h")]
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from exc
    for fn in corners:
        if fn.degree != g_degree:
            raise FormatError(f"{path}: global corner degree mismatch")
    base = UndistortionMap.identity(width, height, chi, psi, degree)
    gh, gw = base.grid_shape
    if len(umap_fns) != gh * gw:
        raise FormatError(f"{path}: expected {gh * gw} umap functions, "
                          f"got {len(umap_fns)}")
    coeffs = np.empty((gh, gw, degree + 1))
    seen = np.zeros((gh, gw), dtype=bool)
    for tokens in umap_fns:
        i, j = int(tokens[0]), int(tokens[1])
        vals = [float(t) for t in tokens[2:]]
        if len(vals) != degree + 1:
            raise FormatError(f"{path}: umap_fn {i} {j} has wrong coefficient count")
        if seen[j, i]:
            raise FormatError(f"{path}: duplicate umap_fn {i} {j}")
        seen[j, i] = True
        coeffs[j, i] = vals
    umap = base.with_coefficients(coeffs)
    gmap = GlobalMap(width, height, *corners)
    return umap, gmap, extrinsic, intr_depth, intr_rgb


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestFrame:
    frame_id: str
    depth_path: str
    corners_path: str
    true_distance: float | None = None


@dataclass(frozen=True)
class DatasetManifest:
    board: BoardSpec
    intr_rgb: CameraIntrinsics
    intr_depth_guess: CameraIntrinsics
    extrinsic_guess: RigidTransform
    frames: tuple  # of ManifestFrame


def write_manifest(path, manifest: DatasetManifest):
    b = manifest.board
    lines = [
        "# depthcal dataset manifest",
        f"version {FORMAT_VERSION}",
        f"board {b.rows} {b.cols} {_fmt(b.square_size)}",
        f"rgb_intrinsics {_intr_tokens(manifest.intr_rgb)}",
        f"depth_intrinsics_guess {_intr_tokens(manifest.intr_depth_guess)}",
        *_transform_lines("extrinsic_guess", manifest.extrinsic_guess),
    ]
    for fr in manifest.frames:
        extra = f" {_fmt(fr.true_distance)}" if fr.true_distance is not None else ""
        lines.append(f"frame {fr.frame_id} {fr.depth_path} {fr.corners_path}{extra}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    kv = {}
    frames = []
    for key, tokens in _read_keyvals(path):
        if key == "frame":
            if len(tokens) not in (3, 4):
                raise FormatError(f"{path}: malformed frame line")
            dist = float(tokens[3]) if len(tokens) == 4 else None
            frames.append(ManifestFrame(tokens[0], tokens[1], tokens[2], dist))
        else:
            kv[key] = tokens
    try:
        board = BoardSpec(int(kv["board"][0]), int(kv["board"][1]),
                          float(kv["board"][2]))
        manifest = DatasetManifest(
            board=board,
            intr_rgb=_intr_from_tokens(kv["rgb_intrinsics"]),
            intr_depth_guess=_intr_from_tokens(kv["depth_intrinsics_guess"]),
            extrinsic_guess=RigidTransform(
                [float(t) for t in kv["extrinsic_guess_quaternion"]],
                [float(t) for t in kv["extrinsic_guess_translation"]]),
            frames=tuple(frames),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from exc
    ids = [fr.frame_id for fr in manifest.frames]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate frame ids")
    return manifest


def load_frames(manifest: DatasetManifest, base_dir, test_only=False,
                train_only=False):
    """Load manifest frames from disk; corners validated against RGB bounds."""
    frames = []
    for fr in manifest.frames:
        if test_only and fr.true_distance is None:
            continue
        if train_only and fr.true_distance is not None:
            continue
        depth = read_depth_pgm(os.path.join(base_dir, fr.depth_path))
        corners = read_corners_csv(os.path.join(base_dir, fr.corners_path))
        if (corners.shape[0], corners.shape[1]) != (manifest.board.rows,
                                                    manifest.board.cols):
            raise FormatError(f"{fr.frame_id}: corner grid does not match the board")
        rgb = manifest.intr_rgb
        if (np.any(corners[:, :, 0] < 0) or np.any(corners[:, :, 0] >= rgb.width)
                or np.any(corners[:, :, 1] < 0) or np.any(corners[:, :, 1] >= rgb.height)):
            raise FormatError(f"{fr.frame_id}: corners outside the RGB image")
        frames.append((fr, Frame(fr.frame_id, depth, corners)))
    return frames


# ---------------------------------------------------------------------------
# dataset writer (used by the synthetic generator)


def write_dataset(scene, labeled_frames, out_dir):
    """Write rendered frames as a dataset directory; returns out_dir.

    Layout: manifest.txt, depth/<id>.pgm, corners/<id>.csv plus the
    ground_truth.txt sidecar that only evaluation code may read.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "corners"), exist_ok=True)
    entries = []
    truth_lines = []
    for lf in labeled_frames:
        fid = lf.frame.frame_id
        depth_rel = f"depth/{fid}.pgm"
        corners_rel = f"corners/{fid}.csv"
        write_depth_pgm(os.path.join(out_dir, depth_rel), lf.frame.depth)
        write_corners_csv(os.path.join(out_dir, corners_rel), lf.frame.corners)
        entries.append(ManifestFrame(fid, depth_rel, corners_rel,
                                     lf.wall_distance if lf.is_test else None))
        q = lf.true_board_pose.quaternion
        t = lf.true_board_pose.translation
        truth_lines.append(
            "frame_truth " + fid + " " + _fmt(lf.wall_distance) + " "
            + " ".join(_fmt(v) for v in t) + " " + " ".join(_fmt(v) for v in q))
    factory_guess = RigidTransform((1.0, 0.0, 0.0, 0.0), (0.025, 0.0, 0.0))
    manifest = DatasetManifest(board=scene.board, intr_rgb=scene.intr_rgb,
                               intr_depth_guess=scene.intr_depth,
                               extrinsic_guess=factory_guess,
                               frames=tuple(entries))
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)

    field = scene.distortion.undistortion_field
    gcorr = scene.distortion.global_correction
    lines = [
        "# depthcal synthetic ground truth (never read by calibration code)",
        f"version {FORMAT_VERSION}",
        *_transform_lines("true_extrinsic", scene.true_extrinsic),
        f"global_correction {' '.join(_fmt(c) for c in gcorr.coefficients)}",
        f"distortion_size {field.width} {field.height}",
        f"distortion_bins {field.chi} {field.psi}",
        f"distortion_degree {field.degree}",
        f"noise {int(scene.noise)}",
        f"seed {scene.seed}",
    ]
    gh, gw = field.grid_shape
    for j in range(gh):
        for i in range(gw):
            coeffs = " ".join(_fmt(c) for c in field.coefficients[j, i])
            lines.append(f"distortion_fn {i} {j} {coeffs}")
    lines.extend(truth_lines)
    _atomic_write_text(os.path.join(out_dir, "ground_truth.txt"),
                       "\n".join(lines) + "\n")
    return out_dir


def read_ground_truth(path):
    """Ground-truth sidecar: (true_extrinsic, global_correction PolyFn,
    distortion UndistortionMap, frame truths {id: (wall_distance, pose)})."""
    kv = {}
    fns = []
    truths = {}
    for key, tokens in _read_keyvals(path):
        if key == "distortion_fn":
            fns.append(tokens)
        elif key == "frame_truth":
            fid = tokens[0]
            vals = [float(t) for t in tokens[1:]]
            truths[fid] = (vals[0], RigidTransform(vals[4:8], vals[1:4]))
        else:
            kv[key] = tokens
    extrinsic = RigidTransform([float(t) for t in kv["true_extrinsic_quaternion"]],
                               [float(t) for t in kv["true_extrinsic_translation"]])
    gcorr = PolyFn([float(t) for t in kv["global_correction"]], constant_zero=True)
    width, height = (int(t) for t in kv["distortion_size"])
    chi, psi = (int(t) for t in kv["distortion_bins"])
    degree = int(kv["distortion_degree"][0])
    base = UndistortionMap.identity(width, height, chi, psi, degree)
    coeffs = base.coefficients.copy()
    for tokens in fns:
        i, j = int(tokens[0]), int(tokens[1])
        coeffs[j, i] = [float(t) for t in tokens[2:]]
    return extrinsic, gcorr, base.with_coefficients(coeffs), truths


# ---------------------------------------------------------------------------
# PLY cloud output


def write_cloud_ply(path, cloud: OrganizedCloud):
    """ASCII PLY of the valid points, double precision for exact round trips."""
    pts = cloud.points[cloud.valid]
    lines = [
        "ply",
        "format ascii 1.0",
        "comment depthcal corrected point cloud",
        f"element vertex {pts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines.extend(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}" for p in pts)
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_cloud_ply(path):
    """Parse the vertex block of an ASCII PLY written by write_cloud_ply."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    body_at = None
    for k, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            count = int(ln.split()[2])
        if ln == "end_header":
            body_at = k + 1
            break
    if count is None or body_at is None:
        raise FormatError(f"{path}: malformed PLY header")
    pts = np.array([[float(v) for v in ln.split()]
                    for ln in lines[body_at:body_at + count]])
    if pts.shape != (count, 3) and count > 0:
        raise FormatError(f"{path}: vertex count mismatch")
    return pts.reshape(count, 3)
