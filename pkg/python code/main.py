# -*- coding: utf-8 -*-

# main.py

import argparse
import logging
import os
import sys

import pandas as pd
import torch

from config import (
    ConfigError,
    DEFAULT_QUALITY,
    apply_env_overrides,
    apply_preset,
    config_from_dict,
    list_quality_presets,
    load_config,
    validate_config,
)
from corpus import CorpusDataset, holdout_split, make_corpus, make_loader, texture_counts
from evalkit import (
    RDCurveError,
    bd_rate_table,
    bit_allocation,
    evaluate_dataset,
    frequency_energy_profile,
    rd_records_from_results,
    read_rd_records,
    timing_report,
    write_rd_records,
)
from graphics import plot_bd_rates, plot_bit_allocation, plot_frequency_profile, plot_rd_curves, plot_timing, plot_training_curves
from mapping import list_ablations, list_metrics, list_textures
from model import CheckpointError, build_model, load_checkpoint, read_checkpoint
from range_coder import BitstreamError
from report_generator import create_dashboard, generate_html_report
from sampler import decode
from training import STAGE1_TERMS, STAGE2_TERMS, NumericDivergenceError, pretrain_autoencoder, read_metrics, require_stage1, train_stage
from utils import create_directories, load_image, save_image, seed_everything, setup_logging

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def print_banner(title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def add_ablation_arguments(parser):
    parser.add_argument("--no-cre", help="Disable the consistency refinement estimator.", action="store_true")
    parser.add_argument("--no-fda", help="Use plain spatial cross-attention instead of frequency decoupling.", action="store_true")
    parser.add_argument("--no-sem", help="Zero the semantic tokens.", action="store_true")
    parser.add_argument("--no-stage2", help="Skip the second training stage.", action="store_true")


def apply_overrides(cfg, args):
    """Apply command-line overrides (preset, ablations, seed) on top of a loaded config"""
    if getattr(args, "preset", None):
        apply_preset(cfg, args.preset)
    for name in ("no_cre", "no_fda", "no_sem", "no_stage2"):
        if getattr(args, name, False):
            setattr(cfg.ablation, name, True)
    if getattr(args, "train_seed", None) is not None:
        cfg.train.seed = args.train_seed
    return validate_config(cfg)


def run_config(args, payload=None):
    """
    Configuration of a command

    The --config file wins; otherwise the config echoed in the checkpoint is
    used, and defaults when neither exists.
    """
    if args.config or payload is None:
        cfg = load_config(args.config)
    else:
        cfg = apply_env_overrides(config_from_dict(payload["config"]))
    return apply_overrides(cfg, args)


def model_from_checkpoint(args, path):
    payload = read_checkpoint(path)
    cfg = run_config(args, payload)
    model, meta = load_checkpoint(path, cfg)
    return model, meta, payload


def cmd_make_corpus(args):
    manifest = make_corpus(args.out, args.n_images, seed=args.seed, size=args.size, workers=args.workers)
    print_banner("SYNTHETIC CORPUS")
    print(f"  • Images written: {len(manifest)}")
    for texture, count in sorted(texture_counts(manifest).items()):
        print(f"  • {texture}: {count}")
    print(f"  • Directory: {args.out}")
    return EXIT_OK


def cmd_train(args):
    payload = read_checkpoint(args.checkpoint) if args.checkpoint else None
    cfg = run_config(args, payload)
    seed_everything(cfg.train.seed)

    if args.stage == 2 and cfg.ablation.no_stage2:
        print("Stage 2 skipped (--no-stage2): evaluate the stage-1 checkpoint directly.")
        return EXIT_OK

    dataset = CorpusDataset(args.corpus, cfg.train.image_size)
    train_set, holdout = holdout_split(dataset, args.holdout)
    loader = make_loader(train_set, cfg.train.batch_size, seed=cfg.train.seed, num_workers=cfg.train.num_workers)

    resume = None
    if args.stage == 2:
        if payload is None:
            raise CheckpointError("stage 2 needs --checkpoint pointing at a stage-1 checkpoint")
        require_stage1(args.checkpoint)
        model, meta = load_checkpoint(args.checkpoint, cfg)
    elif payload is not None:
        model, meta = load_checkpoint(args.checkpoint, cfg)
    else:
        model, meta = build_model(cfg), {"stage": 0, "step": 0}
    if args.resume and payload is not None and meta["stage"] == args.stage:
        resume = payload

    print_banner(f"TRAINING STAGE {args.stage}")
    print(f"  • Training images: {len(train_set)} (held out: {len(holdout)})")
    print(f"  • Preset: lambda2 = {cfg.codec.lambda2}")
    print(f"  • Ablations: {', '.join(cfg.ablation.active()) or 'none'}")

    if args.stage == 1 and not model.ae_trained:
        mse = pretrain_autoencoder(model, loader, cfg)
        print(f"  • Autoencoder pre-trained, reconstruction MSE {mse:.2e}")

    metrics_path = os.path.join(args.out, "metrics.log")
    path = train_stage(model, loader, cfg, args.stage, args.out, steps=args.steps, resume=resume, metrics_path=metrics_path)

    print(f"\nStage {args.stage} completed!")
    print(f"  • Checkpoint: {path}")
    print(f"  • Metrics log: {metrics_path}")
    if args.graphs:
        terms = STAGE1_TERMS if args.stage == 1 else STAGE2_TERMS
        plot_training_curves(
            read_metrics(metrics_path),
            list(terms) + ["total"],
            output_html=os.path.join(args.out, "html", "training.html"),
            output_png=os.path.join(args.out, "png", "training.png"),
        )
    return EXIT_OK


def cmd_compress(args):
    model, meta, _ = model_from_checkpoint(args, args.checkpoint)
    if args.preset and args.preset != meta["preset"]:
        raise ConfigError(f"checkpoint {args.checkpoint} was trained for preset '{meta['preset']}', not '{args.preset}'")
    x = load_image(args.image)
    rep = model.compress_image(x, preset=meta["preset"], label=args.label)
    output = args.output or os.path.splitext(args.image)[0] + ".dcr"
    create_directories(os.path.dirname(output))
    with open(output, "wb") as f:
        f.write(rep.bitstream)

    print_banner("COMPRESSION")
    print(f"  • Image: {args.image} ({rep.image_size[0]}x{rep.image_size[1]})")
    print(f"  • Preset: {rep.preset}")
    print(f"  • Bitstream: {output} ({len(rep.bitstream)} bytes)")
    print(f"  • Hyper / latent bits: {rep.hyper_bits} / {rep.y_bits}")
    print(f"  • Rate: {rep.bpp:.4f} bpp (estimate {rep.estimated_bits / (rep.image_size[0] * rep.image_size[1]):.4f})")
    return EXIT_OK


def cmd_decompress(args):
    model, _, _ = model_from_checkpoint(args, args.checkpoint)
    with open(args.bitstream, "rb") as f:
        data = f.read()
    rep = model.codec.decompress(data)
    seed = model.cfg.sampler.seed if args.seed is None else args.seed
    init = True if args.init_from_control else None
    _, x_hat = decode(model, rep, sampler=args.sampler, steps=args.steps, seed=seed, t_mid=args.t_mid, init_from_control=init)
    output = args.output or os.path.splitext(args.bitstream)[0] + ".png"
    create_directories(os.path.dirname(output))
    save_image(x_hat, output)

    print_banner("DECOMPRESSION")
    print(f"  • Bitstream: {args.bitstream} ({rep.bpp:.4f} bpp)")
    print(f"  • Sampler: {args.sampler}")
    print(f"  • Image: {output} ({rep.image_size[0]}x{rep.image_size[1]})")
    return EXIT_OK


def _figure(out_dir, name):
    return os.path.join(out_dir, "html", f"{name}.html"), os.path.join(out_dir, "png", f"{name}.png")


def cmd_eval(args):
    results = {}
    codec = args.codec
    holdout = None
    for path in args.checkpoints:
        model, meta, _ = model_from_checkpoint(args, path)
        if holdout is None:
            dataset = CorpusDataset(args.corpus, model.cfg.train.image_size)
            holdout = dataset if args.all_images else holdout_split(dataset, args.holdout)[1]
        if codec is None:
            codec = "-".join(["diffcr"] + [a.replace("_", "-") for a in model.cfg.ablation.active()])
        if meta["preset"] in results:
            raise ConfigError(f"two checkpoints share the preset '{meta['preset']}'")
        frame = evaluate_dataset(model, holdout, sampler=args.sampler, steps=args.steps, seed=args.seed or 0, limit=args.limit)
        frame.to_csv(os.path.join(create_results_folder(args.out), f"{codec}_{meta['preset']}.csv"), index=False)
        results[meta["preset"]] = frame

    records_path = args.records or os.path.join(args.out, "rd_records.csv")
    records = write_rd_records(rd_records_from_results(codec, results), records_path)
    summary = pd.DataFrame([
        {"preset": preset, "bpp": frame["bpp"].mean(), **{m: frame[m].mean() for m in list_metrics()}}
        for preset, frame in sorted(results.items())
    ])

    print_banner(f"EVALUATION: {codec}")
    print(summary.to_string(index=False))
    tables = {"Rate and quality per preset": summary}

    anchor = args.anchor or codec
    table = None
    if anchor in set(records["codec"]):
        try:
            table = bd_rate_table(records, anchor, "pchip" if args.pchip else "cubic")
        except RDCurveError as e:
            logger.warning("BD-rate skipped: %s", e)
    if table is not None:
        print(f"\nBD-rate against {anchor}:")
        print(table.to_string(index=False))
        table.to_csv(os.path.join(args.out, "bd_rate.csv"), index=False)
        tables[f"BD-rate against {anchor}"] = table

    if not args.no_graphs:
        figures = []
        for metric in list_metrics():
            html, png = _figure(args.out, f"rd_{metric}")
            plot_rd_curves(records, metric, output_html=html, output_png=png)
            figures.append((png, f"Rate-distortion: {metric}"))
        if table is not None:
            html, png = _figure(args.out, "bd_rate")
            plot_bd_rates(table, output_html=html, output_png=png)
            figures.append((png, "BD-rate"))
        report = generate_html_report(codec, tables, figures, report_directory=os.path.join(args.out, "reports"))
        dashboard = create_dashboard(os.path.join(args.out, "html"))
        print(f"\n  • Report: {report}")
        print(f"  • Dashboard: {dashboard}")
    print(f"  • RD records: {records_path}")
    return EXIT_OK


def create_results_folder(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _analysis_images(dataset, mode, limit):
    """Composite images come first for the bit-allocation audit."""
    order = list(range(len(dataset)))
    if mode == "bits":
        textures = list(dataset.manifest["texture"])
        order.sort(key=lambda i: textures[i] != "composite")
    return [dataset[i][0][None] for i in order[:limit]]


def cmd_analyze(args):
    model, _, _ = model_from_checkpoint(args, args.checkpoint)
    dataset = CorpusDataset(args.corpus, model.cfg.train.image_size)
    images = _analysis_images(dataset, args.mode, args.limit)
    if not images:
        raise FileNotFoundError(f"no images in '{args.corpus}'")
    create_results_folder(args.out)
    seed = args.seed or 0

    print_banner(f"ANALYSIS: {args.mode}")
    if args.mode == "bits":
        for i, x in enumerate(images):
            bits, rate = bit_allocation(model, x)
            print(f"  • Image {i}: {bits.sum():.1f} bits in the map, {rate:.1f} estimated")
            pd.DataFrame(bits).to_csv(os.path.join(args.out, f"bits_{i}.csv"), index=False, header=False)
            if not args.no_graphs:
                html, png = _figure(args.out, f"bit_allocation_{i}")
                plot_bit_allocation(bits, output_html=html, output_png=png)
    elif args.mode == "freq":
        T = model.T
        timesteps = args.timesteps or sorted({max(1, round(T * f)) for f in (0.05, 0.2, 0.4, 0.6, 0.8)} | {T - 1})
        profile = frequency_energy_profile(model, torch.cat(images), timesteps, seed=seed)
        profile.to_csv(os.path.join(args.out, "frequency_profile.csv"), index=False)
        print(profile.to_string(index=False))
        if not args.no_graphs:
            html, png = _figure(args.out, "frequency_profile")
            plot_frequency_profile(profile, output_html=html, output_png=png)
    else:
        timing = timing_report(model, images, repetitions=args.repetitions, ddim_steps=args.steps, seed=seed)
        timing.to_csv(os.path.join(args.out, "timing.csv"), index=False)
        print(timing.to_string(index=False))
        if not args.no_graphs:
            html, png = _figure(args.out, "timing")
            plot_timing(timing, output_html=html, output_png=png)
    return EXIT_OK


def cmd_bd_rate(args):
    records = read_rd_records(args.records)
    table = bd_rate_table(records, args.anchor, "pchip" if args.pchip else "cubic")
    if args.test:
        table = table[table["codec"].isin(args.test)]
    print_banner(f"BD-RATE AGAINST {args.anchor}")
    print(table.to_string(index=False))
    if args.output:
        create_directories(os.path.dirname(args.output))
        table.to_csv(args.output, index=False)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description=(
            "LEARNED IMAGE COMPRESSION WITH TWO-STEP DIFFUSION DECODING\n\n"
            "make-corpus : render the synthetic 64x64 training corpus\n"
            "train       : stage 1 (codec + denoiser + consistency head), stage 2 (pixel fine-tuning)\n"
            "compress    : image -> .dcr bitstream\n"
            "decompress  : .dcr bitstream -> PNG (two-step decoding by default)\n"
            "eval        : RD points per preset checkpoint, BD-rate, plots and report\n"
            "analyze     : bit allocation, spectral profile or decoding time\n"
            "bd-rate     : BD-rate table from an RD record file\n\n"
            "Set DIFFCR_SEED to override the training seed of the config file."
        ),
        epilog=(
            "Examples:\n\n"
            "  python main.py make-corpus --out corpus --n-images 512\n"
            "  python main.py train --stage 1 --corpus corpus --preset q2 --out runs\n"
            "  python main.py train --stage 2 --corpus corpus --checkpoint runs/stage1_q2.pt --out runs\n"
            "  python main.py compress img.png --checkpoint runs/stage2_q2.pt\n"
            "  python main.py decompress img.dcr --checkpoint runs/stage2_q2.pt --t-mid 400\n"
            "  python main.py eval --checkpoints runs/stage2_q*.pt --corpus corpus --out results\n"
            "  python main.py analyze --mode bits --checkpoint runs/stage2_q2.pt --corpus corpus\n"
            "  python main.py bd-rate --records results/rd_records.csv --anchor diffcr\n\n"
            "List available options:\n"
            "  python main.py --list-presets\n"
            "  python main.py --list-ablations\n"
            "  python main.py --list-textures"
        ),
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument("--verbose", help="Debug logging.", action="store_true")
    parser.add_argument("--list-presets", help="Display the quality presets.", action="store_true")
    parser.add_argument("--list-ablations", help="Display the ablation switches.", action="store_true")
    parser.add_argument("--list-textures", help="Display the texture classes of the synthetic corpus.", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("make-corpus", help="Render the synthetic corpus.")
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--n-images", type=int, default=256, help="Number of images. Default: 256")
    p.add_argument("--seed", type=int, default=0, help="Corpus seed. Default: 0")
    p.add_argument("--size", type=int, default=64, help="Image side. Default: 64")
    p.add_argument("--workers", type=int, default=4, help="Rendering threads. Default: 4")
    p.set_defaults(handler=cmd_make_corpus)

    p = sub.add_parser("train", help="Run one training stage.")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--corpus", required=True, help="Corpus directory (with manifest.csv).")
    p.add_argument("--config", help="key=value config file with [section] headers.")
    p.add_argument("--checkpoint", help="Stage-1 checkpoint for stage 2, or a checkpoint to continue from.")
    p.add_argument("--resume", action="store_true", help="Continue the step counter of a same-stage checkpoint.")
    p.add_argument("--preset", choices=list(list_quality_presets()), help=f"Quality preset. Default: {DEFAULT_QUALITY}")
    p.add_argument("--steps", type=int, help="Total steps of the stage (config value by default).")
    p.add_argument("--seed", dest="train_seed", type=int, help="Training seed (overrides config and DIFFCR_SEED).")
    p.add_argument("--holdout", type=float, default=0.1, help="Held-out fraction of the corpus. Default: 0.1")
    p.add_argument("--out", default="runs", help="Checkpoint directory. Default: runs")
    p.add_argument("--graphs", action="store_true", help="Plot the loss curves at the end.")
    add_ablation_arguments(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("compress", help="Compress one image.")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=list(list_quality_presets()), help="Must match the preset the checkpoint was trained for.")
    p.add_argument("--label", type=int, help="Semantic class label (only used when the model was trained with labels).")
    p.add_argument("--output", help="Bitstream path. Default: image path with .dcr")
    p.set_defaults(handler=cmd_compress)

    p = sub.add_parser("decompress", help="Decode a bitstream.")
    p.add_argument("bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--sampler", choices=["two-step", "ddim"], default="two-step")
    p.add_argument("--steps", type=int, help="DDIM steps. Default: config value")
    p.add_argument("--t-mid", type=int, help="Intermediate timestep of two-step decoding. Default: round(0.4 T)")
    p.add_argument("--seed", type=int, help="Sampler seed. Default: config value")
    p.add_argument("--init-from-control", action="store_true", help="Start two-step decoding from noised c_hat instead of pure noise.")
    p.add_argument("--output", help="PNG path. Default: bitstream path with .png")
    p.set_defaults(handler=cmd_decompress)

    p = sub.add_parser("eval", help="RD evaluation of one checkpoint per preset.")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--codec", help="Codec name in the RD records. Default: diffcr plus active ablations")
    p.add_argument("--anchor", help="Anchor codec for BD-rate. Default: the evaluated codec")
    p.add_argument("--records", help="RD record file. Default: <out>/rd_records.csv")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--all-images", action="store_true", help="Evaluate the whole corpus instead of the held-out part.")
    p.add_argument("--limit", type=int, help="At most this many images.")
    p.add_argument("--sampler", choices=["two-step", "ddim"], default="two-step")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pchip", action="store_true", help="Piecewise cubic Hermite BD-rate instead of the cubic fit.")
    p.add_argument("--no-graphs", action="store_true")
    p.add_argument("--out", default="results")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", help="Bit allocation, spectral profile or timing.")
    p.add_argument("--mode", choices=["bits", "freq", "timing"], required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--timesteps", type=int, nargs="+", help="Timesteps analysed by the freq mode.")
    p.add_argument("--repetitions", type=int, default=5, help="Timed runs per image (timing mode).")
    p.add_argument("--steps", type=int, default=50, help="DDIM baseline steps (timing mode).")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-graphs", action="store_true")
    p.add_argument("--out", default="analysis")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("bd-rate", help="BD-rate table from RD records.")
    p.add_argument("--records", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", nargs="+", help="Only report these codecs.")
    p.add_argument("--pchip", action="store_true")
    p.add_argument("--output", help="CSV output.")
    p.set_defaults(handler=cmd_bd_rate)
    return parser


def print_listings(args):
    if args.list_presets:
        print("Available quality presets:\n")
        for code, description in list_quality_presets().items():
            print(f"{code}: {description}")
    if args.list_ablations:
        print("Available ablation switches:\n")
        for code, description in list_ablations().items():
            print(f"--{code.replace('_', '-')}: {description}")
    if args.list_textures:
        print("Texture classes of the synthetic corpus:\n")
        for code, description in list_textures().items():
            print(f"{code}: {description}")


def main(argv=None):
    """
    Command-line entry point

    Returns:
        int: 0 success, 2 usage or config error, 3 data error, 4 numeric divergence
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if args.list_presets or args.list_ablations or args.list_textures:
        print_listings(args)
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"Configuration error: {e}")
        return EXIT_USAGE
    except NumericDivergenceError as e:
        print(f"Training diverged: {e}")
        return EXIT_DIVERGENCE
    except (OSError, BitstreamError, CheckpointError, RDCurveError) as e:
        print(f"Error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
