"""Command-line surface tying generation, training, reconstruction, and
evaluation into reproducible runs.

Every command writes a RunManifest (key=value) recording its arguments,
parsed config fields, input content hashes, seed, thread cap, kernel
backend, and tool version; ``qsmkit rerun <manifest>`` replays a run
into a fresh directory and reproduces the outputs byte for byte.
Exit codes: 0 success, 2 usage/config, 3 I/O, 4 shape/numeric.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, backend, fileio, metrics
from .dipole import (
    NoiseConfig,
    PhantomSpec,
    Volume,
    extract_patches,
    forward_field,
    generate_phantom,
    make_dipole_kernel,
    tkd_invert,
)
from .errors import ConfigError, NumericError, QsmError, ShapeError, UsageError
from .ir2unet import NetworkConfig, build_network, ir2_forward
from .tensor import Tensor
from .training import TrainConfig, init_weights, train_loop

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SHAPE_NUMERIC = 4


def _parse_triple(text, conv, key):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ConfigError(f"{key} must have 3 comma-separated values, got {text!r}")
    return tuple(conv(p) for p in parts)


def _parse_pair(text, key):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ConfigError(f"{key} must have 2 comma-separated values, got {text!r}")
    return (float(parts[0]), float(parts[1]))


_PHANTOM_KEYS = {
    "dims", "voxel_size_mm", "n_spheres", "n_cuboids", "n_cylinders",
    "radius_range_mm", "chi_range_ppm", "seed", "patch", "stride",
}


def load_phantom_spec(path):
    kv = fileio.parse_kv(open(path, encoding="utf-8").read())
    for key in kv:
        if key not in _PHANTOM_KEYS:
            raise ConfigError(f"unknown phantom spec key {key!r}")
    spec = PhantomSpec(
        dims=_parse_triple(kv.get("dims", "32,32,32"), int, "dims"),
        voxel_size_mm=_parse_triple(kv.get("voxel_size_mm", "1,1,1"), float, "voxel_size_mm"),
        n_spheres=int(kv.get("n_spheres", 6)),
        n_cuboids=int(kv.get("n_cuboids", 4)),
        n_cylinders=int(kv.get("n_cylinders", 2)),
        radius_range_mm=_parse_pair(kv.get("radius_range_mm", "2,6"), "radius_range_mm"),
        chi_range_ppm=_parse_pair(kv.get("chi_range_ppm", "-0.2,0.2"), "chi_range_ppm"),
        seed=int(kv.get("seed", 0)),
    )
    patch = _parse_triple(kv.get("patch", "16,16,16"), int, "patch")
    stride = _parse_triple(kv.get("stride", "8,8,8"), int, "stride")
    return spec, patch, stride


_TRAIN_KEYS = {
    "epochs", "batch_size", "lambda", "seed", "checkpoint_every", "lr_override",
    "noise_sigma_ppm", "T", "base_channels", "dropout_rate",
}


def load_train_config(path):
    kv = fileio.parse_kv(open(path, encoding="utf-8").read())
    for key in kv:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"unknown train config key {key!r}")
    sigma = _parse_pair(kv.get("noise_sigma_ppm", "0,0.01"), "noise_sigma_ppm")
    seed = int(kv.get("seed", 0))
    tcfg = TrainConfig(
        epochs=int(kv.get("epochs", 100)),
        batch_size=int(kv.get("batch_size", 4)),
        loss_lambda=float(kv.get("lambda", 0.5)),
        noise=NoiseConfig(sigma_range_ppm=sigma, seed=seed),
        seed=seed,
        checkpoint_every=int(kv.get("checkpoint_every", 1)),
        lr_override=float(kv["lr_override"]) if "lr_override" in kv else None,
    )
    ncfg = NetworkConfig(
        T=int(kv.get("T", 4)),
        base_channels=int(kv.get("base_channels", 16)),
        dropout_rate=float(kv.get("dropout_rate", 0.05)),
    )
    return tcfg, ncfg


def _base_manifest(command, seed):
    # --threads is deliberately not recorded: outputs are invariant to it,
    # so equivalent runs must produce byte-identical manifests
    return {
        "command": command,
        "version": __version__,
        "backend": backend.active_backend(),
        "seed": int(seed),
    }


def cmd_generate(spec_path, out_dir, count, seed, threads):
    spec, patch, stride = load_phantom_spec(spec_path)
    if seed is not None:
        spec.seed = int(seed)
    os.makedirs(out_dir, exist_ok=True)
    manifest = _base_manifest("generate", spec.seed)
    manifest.update(
        {
            "count": int(count),
            "spec": spec_path,
            "input_sha256.spec": fileio.sha256_file(spec_path),
            "spec.dims": ",".join(str(d) for d in spec.dims),
            "spec.voxel_size_mm": ",".join(repr(v) for v in spec.voxel_size_mm),
            "spec.n_spheres": spec.n_spheres,
            "spec.n_cuboids": spec.n_cuboids,
            "spec.n_cylinders": spec.n_cylinders,
            "spec.radius_range_mm": ",".join(repr(v) for v in spec.radius_range_mm),
            "spec.chi_range_ppm": ",".join(repr(v) for v in spec.chi_range_ppm),
            "spec.patch": ",".join(str(p) for p in patch),
            "spec.stride": ",".join(str(s) for s in stride),
        }
    )

    def one_volume(i):
        vol_spec = PhantomSpec(
            dims=spec.dims,
            voxel_size_mm=spec.voxel_size_mm,
            n_spheres=spec.n_spheres,
            n_cuboids=spec.n_cuboids,
            n_cylinders=spec.n_cylinders,
            radius_range_mm=spec.radius_range_mm,
            chi_range_ppm=spec.chi_range_ppm,
            seed=np.random.SeedSequence(entropy=(spec.seed, i)).generate_state(1)[0],
        )
        chi = generate_phantom(vol_spec)
        kernel = make_dipole_kernel(chi.dims, chi.voxel_size_mm)
        fieldvol = forward_field(chi, kernel)
        return i, chi, fieldvol

    results = []
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_volume, range(count)))
    else:
        results = [one_volume(i) for i in range(count)]
    results.sort(key=lambda r: r[0])

    pairs = []
    for i, chi, fieldvol in results:
        fileio.write_qsmv(os.path.join(out_dir, f"chi_{i:04d}.qsmv"), chi)
        fileio.write_qsmv(os.path.join(out_dir, f"field_{i:04d}.qsmv"), fieldvol)
        pairs.extend(extract_patches(chi, fieldvol, patch, stride))
    if count > 0:
        fileio.save_patch_archive(
            os.path.join(out_dir, "patches.qsmc"), pairs, spec.voxel_size_mm
        )
    fileio.write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    print(f"generated {count} volumes, {len(pairs)} patch pairs -> {out_dir}")
    return 0


def cmd_train(data_dir, config_path, out_dir, seed, threads, resume=None):
    archive = os.path.join(data_dir, "patches.qsmc")
    if not os.path.exists(archive):
        raise UsageError(
            f"no patch archive at {archive}; run 'qsmkit generate' into {data_dir} first"
        )
    tcfg, ncfg = load_train_config(config_path)
    if seed is not None:
        tcfg.seed = int(seed)
        tcfg.noise.seed = int(seed)
    os.makedirs(out_dir, exist_ok=True)
    pairs, _ = fileio.load_patch_archive(archive)

    start_epoch = 1
    if resume is not None:
        net, last_epoch = fileio.load_checkpoint(resume)
        if net.cfg != ncfg:
            raise ConfigError("resume checkpoint was built with a different network config")
        start_epoch = last_epoch + 1
    else:
        net = build_network(ncfg, np.random.default_rng(tcfg.seed))
        init_weights(net, np.random.default_rng(tcfg.seed))

    def save_ckpt(epoch, network):
        fileio.save_checkpoint(
            os.path.join(out_dir, f"ckpt_{epoch:04d}.qsmc"), network, epoch=epoch
        )

    net, history = train_loop(
        pairs, net, tcfg, checkpoint_fn=save_ckpt, start_epoch=start_epoch,
        log_fn=lambda e, l, r: print(f"epoch {e}: mean loss {l:.6g} (lr {r:g})"),
    )
    fileio.save_checkpoint(os.path.join(out_dir, "checkpoint.qsmc"), net, epoch=tcfg.epochs)
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8") as f:
        f.write(fileio.history_csv_text(history))

    manifest = _base_manifest("train", tcfg.seed)
    manifest.update(
        {
            "data": data_dir,
            "config": config_path,
            "input_sha256.patches": fileio.sha256_file(archive),
            "input_sha256.config": fileio.sha256_file(config_path),
            "cfg.epochs": tcfg.epochs,
            "cfg.batch_size": tcfg.batch_size,
            "cfg.lambda": tcfg.loss_lambda,
            "cfg.noise_sigma_ppm": ",".join(repr(v) for v in tcfg.noise.sigma_range_ppm),
            "cfg.checkpoint_every": tcfg.checkpoint_every,
            "cfg.lr_override": tcfg.lr_override if tcfg.lr_override is not None else "",
            "cfg.T": ncfg.T,
            "cfg.base_channels": ncfg.base_channels,
            "cfg.dropout_rate": ncfg.dropout_rate,
        }
    )
    if resume is not None:
        manifest["resume"] = resume
        manifest["input_sha256.resume"] = fileio.sha256_file(resume)
    fileio.write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    print(f"trained {tcfg.epochs - start_epoch + 1} epochs, {len(history.steps)} steps -> {out_dir}")
    return 0


def cmd_reconstruct(field_path, out_path, method, checkpoint=None, tkd_threshold=0.2,
                    emit_latents=False, seed=0, threads=1):
    fieldvol = fileio.read_qsmv(field_path)
    manifest = _base_manifest("reconstruct", seed)
    manifest.update(
        {
            "field": field_path,
            "method": method,
            "input_sha256.field": fileio.sha256_file(field_path),
        }
    )
    if method == "tkd":
        kernel = make_dipole_kernel(fieldvol.dims, fieldvol.voxel_size_mm)
        recon = tkd_invert(fieldvol, kernel, tkd_threshold)
        fileio.write_qsmv(out_path, recon)
        manifest["tkd_threshold"] = repr(float(tkd_threshold))
    elif method == "ir2qsm":
        if checkpoint is None:
            raise UsageError("--method ir2qsm requires --checkpoint")
        net, _ = fileio.load_checkpoint(checkpoint)
        d, h, w = fieldvol.dims
        if d % 8 or h % 8 or w % 8:
            raise ShapeError(
                f"field dims {fieldvol.dims} must be divisible by 8 for ir2qsm"
            )
        x = Tensor(fieldvol.values.astype(np.float32)[None, None])
        chi_final, latents = ir2_forward(x, net, mode="eval")
        recon = Volume(chi_final.data[0, 0], voxel_size_mm=fieldvol.voxel_size_mm)
        fileio.write_qsmv(out_path, recon)
        if emit_latents:
            stem, ext = os.path.splitext(out_path)
            for t, lat in enumerate(latents, start=1):
                fileio.write_qsmv(
                    f"{stem}.latent{t}{ext}",
                    Volume(lat.data[0, 0], voxel_size_mm=fieldvol.voxel_size_mm),
                )
        manifest["checkpoint"] = checkpoint
        manifest["input_sha256.checkpoint"] = fileio.sha256_file(checkpoint)
        manifest["emit_latents"] = emit_latents
    else:
        raise ConfigError(f"unknown method {method!r} (expected ir2qsm or tkd)")
    fileio.write_manifest(out_path + ".manifest.txt", manifest)
    print(f"reconstructed {field_path} via {method} -> {out_path}")
    return 0


def _parse_roi_names(text):
    legend = {}
    if not text:
        return legend
    for item in text.split(","):
        label, name = item.split("=", 1)
        legend[int(label)] = name.strip()
    return legend


def cmd_evaluate(pred_path, gt_path, out_dir, mask_path=None, rois_path=None,
                 roi_names="", seed=0, threads=1):
    pred = fileio.read_qsmv(pred_path)
    gt = fileio.read_qsmv(gt_path)
    mask = fileio.read_qsmv(mask_path).values > 0.5 if mask_path else None
    rois = None
    if rois_path:
        rois = metrics.RoiLabelMap(
            np.rint(fileio.read_qsmv(rois_path).values).astype(np.int64),
            legend=_parse_roi_names(roi_names),
        )
    report = metrics.evaluate(pred.values, gt.values, mask=mask, rois=rois)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(report.to_csv_text())
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_text())
    manifest = _base_manifest("evaluate", seed)
    manifest.update(
        {
            "pred": pred_path,
            "gt": gt_path,
            "mask": mask_path or "",
            "rois": rois_path or "",
            "roi_names": roi_names,
            "input_sha256.pred": fileio.sha256_file(pred_path),
            "input_sha256.gt": fileio.sha256_file(gt_path),
        }
    )
    if mask_path:
        manifest["input_sha256.mask"] = fileio.sha256_file(mask_path)
    if rois_path:
        manifest["input_sha256.rois"] = fileio.sha256_file(rois_path)
    fileio.write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    sys.stdout.write(report.to_text())
    return 0


def cmd_export_slice(in_path, out_path, axis, index, window, seed=0, threads=1):
    vol = fileio.read_qsmv(in_path)
    lo_hi = window.split(":")
    if len(lo_hi) != 2:
        raise ConfigError(f"--window must be lo:hi, got {window!r}")
    lo, hi = float(lo_hi[0]), float(lo_hi[1])
    blob = fileio.export_pgm_slice(vol, axis, index, (lo, hi))
    with open(out_path, "wb") as f:
        f.write(blob)
    manifest = _base_manifest("export-slice", seed)
    manifest.update(
        {
            "input": in_path,
            "axis": axis,
            "index": int(index),
            "window_lo": repr(lo),
            "window_hi": repr(hi),
            "input_sha256.input": fileio.sha256_file(in_path),
        }
    )
    fileio.write_manifest(out_path + ".manifest.txt", manifest)
    print(f"exported slice {axis}={index} -> {out_path}")
    return 0


def cmd_rerun(manifest_path, out):
    mf = fileio.read_manifest(manifest_path)
    command = mf.get("command")
    backend.set_backend(mf["backend"])
    for key, value in mf.items():
        if not key.startswith("input_sha256."):
            continue
        role = key.split(".", 1)[1]
        if role == "patches":
            path = os.path.join(mf["data"], "patches.qsmc")
        else:
            path = mf.get(role, "")
        if path and fileio.sha256_file(path) != value:
            raise ConfigError(f"input {role} at {path} changed since the manifest was written")
    seed = int(mf["seed"])
    threads = 1
    if command == "generate":
        return cmd_generate(mf["spec"], out, int(mf["count"]), seed, threads)
    if command == "train":
        return cmd_train(mf["data"], mf["config"], out, seed, threads,
                         resume=mf.get("resume") or None)
    if command == "reconstruct":
        return cmd_reconstruct(
            mf["field"], out, mf["method"],
            checkpoint=mf.get("checkpoint"),
            tkd_threshold=float(mf.get("tkd_threshold", 0.2)),
            emit_latents=mf.get("emit_latents", "False") == "True",
            seed=seed, threads=threads,
        )
    if command == "evaluate":
        return cmd_evaluate(
            mf["pred"], mf["gt"], out,
            mask_path=mf.get("mask") or None,
            rois_path=mf.get("rois") or None,
            roi_names=mf.get("roi_names", ""),
            seed=seed, threads=threads,
        )
    if command == "export-slice":
        return cmd_export_slice(
            mf["input"], out, mf["axis"], int(mf["index"]),
            f"{mf['window_lo']}:{mf['window_hi']}", seed=seed, threads=threads,
        )
    raise ConfigError(f"manifest has unknown command {command!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qsmkit",
        description="Desk-scale QSM dipole-inversion toolkit",
    )
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker-thread cap; results are invariant to it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize phantoms, fields, and patches")
    p.add_argument("spec", help="phantom spec file (key=value)")
    p.add_argument("out", help="output directory")
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("train", help="train the reconstructor on a patch archive")
    p.add_argument("data", help="directory containing patches.qsmc")
    p.add_argument("config", help="train config file (key=value)")
    p.add_argument("out", help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("reconstruct", help="invert a field volume")
    p.add_argument("field", help="input field .qsmv")
    p.add_argument("out", help="output reconstruction .qsmv")
    p.add_argument("--method", choices=("ir2qsm", "tkd"), default="ir2qsm")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tkd-threshold", type=float, default=0.2)
    p.add_argument("--emit-latents", action="store_true")

    p = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", default=".")
    p.add_argument("--mask", default=None)
    p.add_argument("--rois", default=None)
    p.add_argument("--roi-names", default="", help="e.g. '1=GP,2=PU'")

    p = sub.add_parser("export-slice", help="export one slice as 16-bit PGM")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--window", required=True, help="lo:hi in ppm")

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="fresh output directory/path")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.command == "generate":
            return cmd_generate(args.spec, args.out, args.count, args.seed, args.threads)
        if args.command == "train":
            return cmd_train(args.data, args.config, args.out, args.seed, args.threads,
                             resume=args.resume)
        if args.command == "reconstruct":
            return cmd_reconstruct(
                args.field, args.out, args.method, checkpoint=args.checkpoint,
                tkd_threshold=args.tkd_threshold, emit_latents=args.emit_latents,
                seed=args.seed or 0, threads=args.threads,
            )
        if args.command == "evaluate":
            return cmd_evaluate(
                args.pred, args.gt, args.out, mask_path=args.mask, rois_path=args.rois,
                roi_names=args.roi_names, seed=args.seed or 0, threads=args.threads,
            )
        if args.command == "export-slice":
            return cmd_export_slice(
                args.input, args.out, args.axis, args.index, args.window,
                seed=args.seed or 0, threads=args.threads,
            )
        if args.command == "rerun":
            return cmd_rerun(args.manifest, args.out)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, NumericError, QsmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
