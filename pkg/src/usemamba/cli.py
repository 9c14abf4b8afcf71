"""Command line: ``usemamba {simulate,train,enhance,evaluate}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pydantic

from .combiner import CombinerConfig
from .config import RunConfig, load_config
from .distortions import DistortionError, DistortionSpec, read_manifest, simulate, write_manifest
from .metrics import MetricReport, score
from .model import load_checkpoint
from .pipeline import MODES, Enhancer
from .signals import ConfigError, Waveform, read_wav, resample, write_wav
from .train import DataError, NumericalError, Trainer, load_pairs

log = logging.getLogger("usemamba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_echo(run: RunConfig, directory) -> Path:
    path = Path(directory) / "config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(run.echo())
    return path


def _wav_files(directory, what: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{what} directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DataError(f"{what} directory {d} holds no WAV files")
    return files


def _read_all(files, what: str):
    """Readable waveforms plus the count of skipped files."""
    waves, skipped = [], 0
    for f in files:
        try:
            waves.append((f, read_wav(f)))
        except Exception as exc:  # any unreadable file is skipped, not fatal
            log.warning("skipping unreadable %s file %s: %s", what, f, exc)
            skipped += 1
    return waves, skipped


def _at_rate(wave: Waveform, rate: int) -> Waveform:
    return wave if wave.rate_hz == rate else resample(wave, rate)


# -- simulate --------------------------------------------------------------------


def _draw_params(kind: str, sim, clean: Waveform, rng: np.random.Generator):
    if kind == "additive_noise":
        return {"snr_db": float(rng.uniform(*sim.snr_db))}
    if kind == "clipping":
        return {"clip_threshold": float(rng.uniform(*sim.clip_threshold))}
    if kind == "bandwidth_limit":
        options = [c for c in sim.cutoff_hz if c < clean.rate_hz / 2]
        if not options:
            return None
        return {"cutoff_hz": float(options[int(rng.integers(len(options)))])}
    if kind == "packet_loss":
        return {"n_segments": sim.n_loss_segments, "segment_s": sim.loss_segment_s}
    return {}


def cmd_simulate(run: RunConfig, clean_dir, noise_dir, rir_dir, out_dir) -> Path:
    sim = run.simulation
    out_dir = run.resolve(out_dir)
    cleans, skipped = _read_all(_wav_files(clean_dir, "clean"), "clean")
    noises = rirs = []
    if "additive_noise" in sim.kinds:
        if noise_dir is None:
            raise UsageError("additive_noise needs --noise-dir")
        noises, n_skip = _read_all(_wav_files(noise_dir, "noise"), "noise")
        skipped += n_skip
        if not noises:
            raise DataError("no readable noise files")
    if "reverberation" in sim.kinds:
        if rir_dir is None:
            raise UsageError("reverberation needs --rir-dir")
        rirs, n_skip = _read_all(_wav_files(rir_dir, "rir"), "rir")
        skipped += n_skip
        if not rirs:
            raise DataError("no readable impulse responses")
    entries = []
    for i, (clean_path, clean) in enumerate(cleans):
        for k, kind in enumerate(sim.kinds):
            seed = int(np.random.SeedSequence([sim.seed, i, k]).generate_state(1)[0])
            rng = np.random.default_rng(seed)
            params = _draw_params(kind, sim, clean, rng)
            if params is None:
                log.warning("%s: no cutoff below Nyquist at %d Hz, bandwidth_limit skipped", clean_path.name, clean.rate_hz)
                continue
            noise = rir = None
            if kind == "additive_noise":
                name, noise = noises[int(rng.integers(len(noises)))]
                noise = _at_rate(noise, clean.rate_hz)
                params["noise_file"] = name.name
            elif kind == "reverberation":
                name, rir = rirs[int(rng.integers(len(rirs)))]
                rir = _at_rate(rir, clean.rate_hz)
                params["rir_file"] = name.name
            degraded_path = out_dir / "degraded" / f"{clean_path.stem}__{kind}.wav"
            try:
                degraded, entry = simulate(
                    clean, DistortionSpec(kind, params, seed), noise, rir, degraded_path, clean_path
                )
            except DistortionError as exc:
                log.warning("skipping %s / %s: %s", clean_path.name, kind, exc)
                skipped += 1
                continue
            write_wav(degraded_path, degraded, sim.output_format)
            entries.append(entry)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    _write_echo(run, out_dir)
    log.info("wrote %d entries to %s (%d inputs skipped)", len(entries), manifest, skipped)
    return manifest


# -- train -----------------------------------------------------------------------


def cmd_train(run: RunConfig, variant=None, manifest=None, out_dir=None, resume=None) -> Path:
    variant = variant or run.model.variant
    if variant != run.model.variant:
        raise UsageError(
            f"--variant {variant} conflicts with model.variant={run.model.variant}; "
            f"set model.variant={variant} in the config"
        )
    pairs = load_pairs(run.resolve(manifest or run.paths.manifest))
    trainer = Trainer(run, pairs, variant)
    ckpt_dir = run.resolve(out_dir or Path(run.paths.checkpoints) / variant)
    if resume:
        trainer.restore(resume)
        log.info("resumed from %s at step %d", resume, trainer.step)
    _write_echo(run, ckpt_dir)
    trainer.fit(ckpt_dir)
    return ckpt_dir / "last.pt"


# -- enhance ---------------------------------------------------------------------


def _inputs(path: Path):
    if path.suffix.lower() == ".wav":
        return [path]
    return [Path(e.degraded_path) for e in read_manifest(path)]


def cmd_enhance(run: RunConfig, mode, inputs, out_dir=None, regression_ckpt=None, flow_ckpt=None) -> list[Path]:
    reg = load_checkpoint(regression_ckpt, expect_variant="regression")[0] if regression_ckpt else None
    flow = load_checkpoint(flow_ckpt, expect_variant="flow")[0] if flow_ckpt else None
    enhancer = Enhancer(mode, reg, flow, run.flow.build(), run.combiner.build())
    out_dir = run.resolve(out_dir or run.paths.output_dir)
    files = _inputs(Path(inputs))
    written = []
    for f in files:
        noisy = read_wav(f)
        enhanced = enhancer(noisy)
        target = out_dir / f.name
        write_wav(target, enhanced, "float32")
        written.append(target)
        log.info("%s -> %s", f, target)
    _write_echo(run, out_dir)
    return written


# -- evaluate --------------------------------------------------------------------


def _fit_length(wave: Waveform, n: int) -> Waveform:
    x = wave.samples
    x = x[:n] if len(x) >= n else np.pad(x, (0, n - len(x)))
    return Waveform(x, wave.rate_hz)


def cmd_evaluate(run: RunConfig, manifest, enhanced_dir, report_path=None) -> MetricReport:
    entries = read_manifest(run.resolve(manifest or run.paths.manifest))
    enhanced_dir = Path(enhanced_dir)
    report = MetricReport()
    for e in entries:
        name = Path(e.degraded_path).name
        est_path = enhanced_dir / name
        if not est_path.is_file():
            log.error("missing enhanced file %s", est_path)
            report.missing.append(name)
            continue
        ref, est = read_wav(e.clean_path), read_wav(est_path)
        if est.rate_hz != ref.rate_hz:
            log.warning("%s: %d Hz, resampling to the reference rate %d Hz", name, est.rate_hz, ref.rate_hz)
            est = resample(est, ref.rate_hz)
        if len(est) != len(ref):
            log.warning("%s: %d samples vs %d in the reference, trimmed/padded", name, len(est), len(ref))
            est = _fit_length(est, len(ref))
        report.add(name, score(est, ref))
    report_path = Path(report_path) if report_path else enhanced_dir / "report.json"
    report.write(report_path)
    _write_echo(run, report_path.parent)
    return report


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="usemamba", description="Universal speech enhancement with TF-Mamba models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dot path, e.g. training.steps=200")

    sp = sub.add_parser("simulate", help="degrade clean speech and write a manifest")
    common(sp)
    sp.add_argument("--clean-dir", required=True)
    sp.add_argument("--noise-dir")
    sp.add_argument("--rir-dir")
    sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("train", help="train the regression or flow model")
    common(sp)
    sp.add_argument("--variant", choices=("regression", "flow"))
    sp.add_argument("--manifest")
    sp.add_argument("--out-dir", help="checkpoint directory")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("enhance", help="enhance a WAV file or every degraded file of a manifest")
    common(sp)
    sp.add_argument("--mode", choices=MODES, default="regression")
    sp.add_argument("--input", required=True, help="WAV file or manifest (.jsonl)")
    sp.add_argument("--out-dir")
    sp.add_argument("--regression-ckpt")
    sp.add_argument("--flow-ckpt")

    sp = sub.add_parser("evaluate", help="score enhanced files against the clean references")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--enhanced-dir", required=True)
    sp.add_argument("--report", help="output JSON (default: <enhanced-dir>/report.json)")
    return p


def _dispatch(args) -> int:
    run = load_config(args.config, args.overrides)
    if args.command == "simulate":
        cmd_simulate(run, args.clean_dir, args.noise_dir, args.rir_dir, args.out_dir)
    elif args.command == "train":
        cmd_train(run, args.variant, args.manifest, args.out_dir, args.resume)
    elif args.command == "enhance":
        cmd_enhance(run, args.mode, args.input, args.out_dir, args.regression_ckpt, args.flow_ckpt)
    else:
        report = cmd_evaluate(run, args.manifest, args.enhanced_dir, args.report)
        if report.missing:
            log.error("%d enhanced file(s) missing, %d scored", len(report.missing), len(report.files))
            return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (UsageError, pydantic.ValidationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, DistortionError, ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ValueError as exc:  # checkpoint/config mismatches and bad arguments
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
