"""Command-line surface: phantom generation, training, segmentation, and
evaluation.

Subcommands mirror the experiment designs the package exists to run:
per-orientation training sets, mixed-orientation sets, and reduced mixed
sets. Every command writes the fully resolved configuration it ran with
(``config.txt``, key=value lines) next to its outputs, so a run is
reproducible from its artifacts alone.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import network as net
from .errors import ConfigError, DataError, IcvsegError, NumericError
from .inference import Provenance, largest_component_3d, segment_volume, threshold
from .optim import AdamState
from .phantom import PhantomConfig, generate_dataset, patient_split
from .sampling import TrainingScan, build_epoch_plan, epoch_seed, stream_minibatches
from .volumes import (
    ORIENTATIONS,
    Volume,
    normalize_intensity,
    read_annotated_mask,
    read_sidecar,
    read_volume,
    sidecar_path,
    write_annotated_mask,
    write_sidecar,
    write_volume,
)

log = logging.getLogger("icvseg")

DATA_ROOT_ENV = "ICVSEG_DATA_ROOT"

PROFILES = {
    "full": net.default_spec,
    "desk": net.desk_spec,
    "tiny": net.tiny_spec,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors -> exit code 1, not argparse's 2
        raise ConfigError(message)


def _write_config(out_dir: Path, entries: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _read_config_file(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line in {path}: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args, key: str, cast, default, file_cfg: dict):
    """Precedence: explicit flag, then config file entry, then default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in file_cfg:
        try:
            return cast(file_cfg[key])
        except ValueError as e:
            raise ConfigError(f"bad config value for {key}: {file_cfg[key]!r}") from e
    return default


# ----------------------------------------------------------------- phantom

def _scan_name(patient_id: str, orientation: str) -> str:
    return f"{patient_id}_{orientation}"


def cmd_phantom(args) -> int:
    out = Path(args.out)
    config = PhantomConfig(
        extents=tuple(args.extents),
        spacing=tuple(args.spacing),
        noise_level=args.noise_level,
    )
    scans = generate_dataset(args.patients, scans_per_patient=args.scans_per_patient,
                             base_seed=args.seed, config=config)
    out.mkdir(parents=True, exist_ok=True)
    for volume, mask in scans:
        name = _scan_name(volume.patient_id, volume.orientation)
        write_volume(out / f"{name}.nii", volume)
        write_annotated_mask(out / f"{name}_mask.nii", mask)
    _write_config(out, {
        "command": "phantom",
        "patients": args.patients,
        "scans_per_patient": args.scans_per_patient,
        "seed": args.seed,
        "extents": ",".join(str(e) for e in args.extents),
        "spacing": ",".join(str(s) for s in args.spacing),
        "noise_level": args.noise_level,
        "out": str(out),
    })
    log.info("wrote %d scans to %s", len(scans), out)
    return 0


# ------------------------------------------------------------------- train

def _discover_scans(data_dir: Path):
    """scan_id -> (image path, mask path, patient_id, orientation)."""
    if not data_dir.is_dir():
        raise DataError(f"dataset directory {data_dir} does not exist")
    found = {}
    for meta_file in sorted(data_dir.glob("*.meta")):
        meta = read_sidecar(meta_file)
        if meta.get("role") != "image":
            continue
        nii = meta_file.with_suffix(".nii")
        if not nii.exists():
            raise DataError(f"sidecar {meta_file} has no matching volume {nii}")
        scan_id = nii.stem
        mask = data_dir / f"{scan_id}_mask.nii"
        found[scan_id] = (nii, mask if mask.exists() else None,
                          meta.get("patient_id", scan_id),
                          meta.get("orientation", "unknown"))
    if not found:
        raise DataError(f"no image volumes found in {data_dir}")
    return found


def _select_training_scans(data_dir: Path, composition: dict, n_test: int):
    """Pick the first N train-split scans per orientation, sorted by id."""
    catalog = _discover_scans(data_dir)
    split = patient_split([p for (_, _, p, _) in catalog.values()], n_test=n_test)
    chosen = []
    for orientation, want in composition.items():
        if want == 0:
            continue
        pool = sorted(
            sid for sid, (_, mask, pid, ori) in catalog.items()
            if ori == orientation and pid in split.train_patients and mask is not None
        )
        if want > len(pool):
            raise ConfigError(
                f"requested {want} {orientation} training scans but only "
                f"{len(pool)} are available in the training split"
            )
        chosen += pool[:want]
    if not chosen:
        raise ConfigError("empty training-set composition")
    scans = []
    for sid in chosen:
        nii, mask_path, _, _ = catalog[sid]
        scans.append(TrainingScan(scan_id=sid, image=read_volume(nii),
                                  mask=read_annotated_mask(mask_path)))
    return scans, split


def _spec_from_args(args, file_cfg: dict) -> net.NetworkSpec:
    profile = _resolve(args, "profile", str, "desk", file_cfg)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    spec = PROFILES[profile]()
    patch_sizes = getattr(args, "patch_sizes", None)
    if patch_sizes is None and "patch_sizes" in file_cfg:
        patch_sizes = [int(v) for v in file_cfg["patch_sizes"].split(",")]
    if patch_sizes is not None:
        if len(patch_sizes) != 3:
            raise ConfigError("patch-sizes override needs exactly 3 values")
        branches = tuple(
            net.BranchSpec(int(s), b.convs, b.dense_widths)
            for s, b in zip(patch_sizes, spec.branches)
        )
        spec = net.NetworkSpec(branches=branches, dropout_rate=spec.dropout_rate,
                               bn_momentum=spec.bn_momentum, bn_epsilon=spec.bn_epsilon)
    net.validate_spec(spec)
    return spec


def cmd_train(args) -> int:
    file_cfg = _read_config_file(args.config) if args.config else {}
    data_dir = Path(_resolve(args, "data", str, os.environ.get(DATA_ROOT_ENV, ""), file_cfg))
    if not str(data_dir):
        raise ConfigError(f"no dataset directory: pass --data or set {DATA_ROOT_ENV}")
    out = Path(_resolve(args, "out", str, "", file_cfg) or "train_out")
    composition = {
        o: int(_resolve(args, o, int, 0, file_cfg)) for o in ORIENTATIONS
    }
    if all(v == 0 for v in composition.values()):
        raise ConfigError("training composition is empty; pass --axial/--coronal/--sagittal")
    epochs = int(_resolve(args, "epochs", int, 10, file_cfg))
    batch_size = int(_resolve(args, "batch_size", int, 128, file_cfg))
    samples = int(_resolve(args, "samples_per_class", int, 500, file_cfg))
    seed = int(_resolve(args, "seed", int, 0, file_cfg))
    lr = float(_resolve(args, "lr", float, 1e-3, file_cfg))
    n_test = int(_resolve(args, "test_patients", int, 3, file_cfg))
    label = _resolve(args, "label", str, "", file_cfg) or ", ".join(
        f"{n} {o}" for o, n in composition.items() if n
    )
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")

    spec = _spec_from_args(args, file_cfg)
    scans, _ = _select_training_scans(data_dir, composition, n_test)
    log.info("training on %d scans: %s", len(scans), ", ".join(s.scan_id for s in scans))

    params = net.init_params(spec, seed=seed)
    adam = AdamState.for_arrays(params.trainable_arrays(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0)))
    losses = []
    for epoch in range(epochs):
        plan = build_epoch_plan(scans, samples, seed=epoch_seed(seed, epoch))
        batches = stream_minibatches(plan, scans, batch_size, spec.patch_sizes)
        loss = net.train_epoch(params, spec, batches, adam, rng)
        losses.append(loss)
        log.info("epoch %d/%d: loss %.5f", epoch + 1, epochs, loss)

    out.mkdir(parents=True, exist_ok=True)
    ckpt = net.Checkpoint(spec=spec, params=params, adam=adam, metadata={
        "seed": seed,
        "epochs": epochs,
        "loss_history": losses,
        "label": label,
        "composition": {o: n for o, n in composition.items() if n},
    })
    crc = net.save_checkpoint(out / "checkpoint.ckpt", ckpt)
    (out / "loss_log.txt").write_text(
        "".join(f"{i + 1}\t{v:.6f}\n" for i, v in enumerate(losses))
    )
    _write_config(out, {
        "command": "train",
        "data": str(data_dir),
        "out": str(out),
        **{o: composition[o] for o in ORIENTATIONS},
        "epochs": epochs,
        "batch_size": batch_size,
        "samples_per_class": samples,
        "seed": seed,
        "lr": lr,
        "test_patients": n_test,
        "label": label,
        "profile": _resolve(args, "profile", str, "desk", file_cfg),
        "patch_sizes": ",".join(str(s) for s in spec.patch_sizes),
        "checkpoint_crc": f"{crc:08x}",
    })
    log.info("checkpoint written to %s (payload crc %08x)", out / "checkpoint.ckpt", crc)
    return 0


# ----------------------------------------------------------------- segment

def cmd_segment(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} does not exist")
    ckpt = net.load_checkpoint(ckpt_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = Provenance(checkpoint=f"{ckpt_path.name}:{ckpt.payload_crc:08x}")
    for vol_path in args.volumes:
        volume = read_volume(vol_path)
        name = Path(vol_path).stem
        normalized = normalize_intensity(volume)
        prob = segment_volume(normalized, ckpt.params, ckpt.spec,
                              pixel_stride=args.stride)
        binary = threshold(prob)
        seg = largest_component_3d(binary, connectivity=args.connectivity,
                                   provenance=prov)
        if seg.provenance.empty_input:
            log.warning("%s: no foreground voxels survived thresholding", name)
        write_volume(out / f"{name}_prob.nii",
                     Volume(prob.data, volume.spacing, volume.orientation,
                            volume.patient_id))
        write_volume(out / f"{name}_mask.nii",
                     Volume(seg.data.astype(np.int16), volume.spacing,
                            volume.orientation, volume.patient_id), role="mask")
        log.info("%s: %d foreground voxels after component filtering",
                 name, seg.voxel_count)
    _write_config(out, {
        "command": "segment",
        "checkpoint": str(ckpt_path),
        "checkpoint_crc": f"{ckpt.payload_crc:08x}",
        "stride": args.stride,
        "connectivity": args.connectivity,
        "volumes": ",".join(str(v) for v in args.volumes),
        "out": str(out),
    })
    return 0


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    ref_dir = Path(args.reference)
    pred_dir = Path(args.predictions)
    if not ref_dir.is_dir():
        raise DataError(f"reference directory {ref_dir} does not exist")
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    refs = sorted(ref_dir.glob("*_mask.nii"))
    if not refs:
        raise DataError(f"no reference masks *_mask.nii in {ref_dir}")
    records = []
    for ref_path in refs:
        scan_id = ref_path.stem[: -len("_mask")]
        pred_path = pred_dir / ref_path.name
        if not pred_path.exists():
            raise DataError(f"prediction for scan {scan_id} missing: {pred_path}")
        reference = read_annotated_mask(ref_path)
        prediction = read_volume(pred_path)
        records.append(metrics_mod.evaluate_scan(reference, prediction.data != 0,
                                                 scan_id=scan_id))
    label = args.label or "evaluation"
    report = metrics_mod.build_report(records, label)
    out = Path(args.out)
    metrics_mod.write_report(out, report)
    _write_config(out, {
        "command": "evaluate",
        "reference": str(ref_dir),
        "predictions": str(pred_dir),
        "label": label,
        "out": str(out),
    })
    sys.stdout.write(metrics_mod.format_table(report))
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icvseg", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--scans-per-patient", type=int, default=3, dest="scans_per_patient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--extents", type=int, nargs=3, default=[128, 128, 32])
    p.add_argument("--spacing", type=float, nargs=3, default=[0.7, 0.7, 2.5])
    p.add_argument("--noise-level", type=float, default=0.03, dest="noise_level")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a classifier on a dataset")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV})")
    p.add_argument("--out")
    for o in ORIENTATIONS:
        p.add_argument(f"--{o}", type=int, help=f"number of {o} training scans")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--patch-sizes", type=int, nargs=3, dest="patch_sizes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class",
                   help="per scan per epoch")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--test-patients", type=int, dest="test_patients")
    p.add_argument("--label", help="experiment label used in report tables")
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="single-threaded bit-reproducible path (always on)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment volumes with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("volumes", nargs="+")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--reference", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 1
    except DataError as e:
        log.error("%s", e)
        return 2
    except NumericError as e:
        log.error("%s", e)
        return 3
    except IcvsegError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
