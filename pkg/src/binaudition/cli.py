"""Command-line entry point: ``binaudition <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 missing argument, 4 file error,
5 bad config, 6 incompatible artifact, 1 any other failure. Failures print
one JSON line ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CompatibilityError, FormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_FILE, EXIT_CONFIG, EXIT_COMPAT = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("binaudition")


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, "usage", message)


# --- helpers -------------------------------------------------------------------

def atomic_write(path, data: bytes):
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise CliError(EXIT_FILE, "file", f"output directory {path.parent} does not exist")
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_hash():
    """Digest of the package sources; identifies the code that produced an artifact."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out_path, command, args, inputs):
    """Sidecar ``<out>.manifest.json``: command, resolved arguments, input digests."""
    doc = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
        "version": __version__,
        "code_hash": code_hash(),
    }
    target = Path(out_path)
    side = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    atomic_write(side, (json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n").encode())


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_FILE, "file", f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, "config", f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def apply_config(args, parser_defaults, config):
    for k, v in config.items():
        if k not in parser_defaults:
            raise CliError(EXIT_CONFIG, "config", f"unknown config key {k!r} for {args.command}")
        if getattr(args, k) == parser_defaults[k]:  # command line wins
            default = parser_defaults[k]
            try:
                setattr(args, k, type(default)(v) if default is not None else v)
            except ValueError as exc:
                raise CliError(EXIT_CONFIG, "config", f"bad value for {k}: {v!r}") from exc


def need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise CliError(EXIT_MISSING, "missing_argument", f"{args.command} requires --{n.replace('_', '-')}")


def _exists(path, what):
    if not Path(path).exists():
        raise CliError(EXIT_FILE, "file", f"{what} {path} not found")
    return path


def _load_hrtf(path):
    from .hrtf import load_hrtf
    return load_hrtf(_exists(path, "HRTF file"))


def _load_ssde(path):
    from .ssde import SSDEModel
    return SSDEModel.load(_exists(path, "model"))


# --- commands --------------------------------------------------------------------

def cmd_synth_hrtf(args):
    from .hrtf import HeadModel, save_hrtf, synthesize_hrtf
    need(args, "out")
    params = HeadModel(ear_azimuth=args.ear_azimuth, ear_elevation=args.ear_elevation)
    hset = synthesize_hrtf(params=params)
    tmp = Path(args.out).with_name(f".{Path(args.out).name}.tmp")
    save_hrtf(hset, tmp)
    os.replace(tmp, args.out)
    write_manifest(args.out, "synth-hrtf", args, [])


def cmd_train_ssde(args):
    from .ssde import TrainingConfig, default_trained_bins, train
    need(args, "hrtf", "out", "seed")
    hset = _load_hrtf(args.hrtf)
    cfg = TrainingConfig(sigma=np.radians(args.sigma_deg), examples_per_bin=args.examples_per_bin,
                         epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    bins = default_trained_bins(hset.n_fft, hset.sample_rate, step=args.bin_step)
    model = train(hset, bins, cfg, progress=lambda i, n: log.info("trained %d/%d", i + 1, n))
    atomic_write(args.out, model.to_bytes())
    write_manifest(args.out, "train-ssde", args, [args.hrtf])


def cmd_train_mel(args):
    from .detect import load_corpus, make_corpus, train_melcnn
    need(args, "corpus", "out", "seed")
    if args.make_corpus:
        make_corpus(args.corpus, n_per_label=args.clips_per_label, seed=args.seed)
    _exists(Path(args.corpus) / "manifest.csv", "corpus manifest")
    corpus = load_corpus(args.corpus)
    model = train_melcnn(corpus, epochs=args.epochs, seed=args.seed)
    atomic_write(args.out, model.to_bytes())
    write_manifest(args.out, "train-mel", args, [Path(args.corpus) / "manifest.csv"])


def cmd_localize(args):
    from .evaluation import WINDOW_FRAMES, music_window_estimate, ssde_window_estimate
    from .frontend import read_wav, stft_pair
    from .grid import build_direction_grid, to_angles
    need(args, "wav", "hrtf", "out")
    if args.method not in ("music", "ssde"):
        raise CliError(EXIT_USAGE, "usage", f"unknown method {args.method!r}")
    if args.method == "ssde":
        need(args, "model")
    hset = _load_hrtf(args.hrtf)
    stream = read_wav(_exists(args.wav, "WAV file"))
    _, xl, xr = stft_pair(stream, n_fft=hset.n_fft)
    grid = build_direction_grid()
    az, el = to_angles(grid.directions)
    model = _load_ssde(args.model) if args.method == "ssde" else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_window", "method", "direction_id", "azimuth_deg", "elevation_deg", "score"])
    for i, s in enumerate(range(0, len(xl) - WINDOW_FRAMES + 1, WINDOW_FRAMES)):
        wl, wr = xl[s:s + WINDOW_FRAMES], xr[s:s + WINDOW_FRAMES]
        if model is not None:
            from .ssde import window_existence
            k = ssde_window_estimate(model, wl, wr, None)
            score = window_existence(model, wl, wr)[k]
        else:
            from .music import music_estimate
            k = music_window_estimate(hset, wl, wr)
            try:
                score = music_estimate(wl, wr, hset)[1][k]
            except ValueError:
                score = float("nan")
        w.writerow([i, args.method, k, f"{az[k]:.4f}", f"{el[k]:.4f}", f"{score:.6g}"])
    atomic_write(args.out, buf.getvalue().encode())
    write_manifest(args.out, "localize", args, [args.wav, args.hrtf, args.model])


def cmd_detect(args):
    from .detect import MelCnnModel, detect
    from .frontend import read_wav
    need(args, "wav", "model", "out")
    model = MelCnnModel.load(_exists(args.model, "model"))
    stream = read_wav(_exists(args.wav, "WAV file"))
    events = detect(stream, model, threshold=args.threshold)
    atomic_write(args.out, "".join(e.to_json() + "\n" for e in events).encode())
    write_manifest(args.out, "detect", args, [args.wav, args.model])


def cmd_eval(args):
    from .evaluation import report, run_simulation, write_outputs
    need(args, "model", "hrtf", "out")
    model, hset = _load_ssde(args.model), _load_hrtf(args.hrtf)
    if model.grid_hash != hset.grid_hash:
        raise CompatibilityError("model and HRTF set use different grids")
    directions = range(0, hset.n_directions, args.direction_step)
    results = run_simulation(model, hset, directions=directions, snr_db=args.snr_db, seed=args.seed,
                             noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_outputs(results, out)
    (out / "report.txt").write_text(report(results))
    write_manifest(out, "eval", args, [args.model, args.hrtf])


def cmd_report(args):
    from .evaluation import read_trials_csv, report, summarize
    need(args, "trials")
    results = read_trials_csv(_exists(args.trials, "trial table"))
    text = report(results)
    if args.out:
        atomic_write(args.out, text.encode())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "method", "mean_error_deg", "mirror_forgiving_error_deg"])
        for c, m, e, f in summarize(results):
            w.writerow([c, m, f"{e:.4f}", f"{f:.4f}"])
        atomic_write(Path(args.out).with_suffix(".csv"), buf.getvalue().encode())
        write_manifest(args.out, "report", args, [args.trials])
    else:
        sys.stdout.write(text)


def build_parser():
    p = _Parser(prog="binaudition", description="Binaural localization and detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="flat key=value file supplying defaults")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth-hrtf", cmd_synth_hrtf, "synthesize the spherical-head HRTF set")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; synthesis is deterministic")
    sp.add_argument("--ear-azimuth", type=float, default=100.0)
    sp.add_argument("--ear-elevation", type=float, default=0.0)

    sp = add("train-ssde", cmd_train_ssde, "train per-bin existence networks")
    sp.add_argument("--hrtf")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int, default=500)
    sp.add_argument("--examples-per-bin", type=int, default=1000)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--sigma-deg", type=float, default=15.0)
    sp.add_argument("--bin-step", type=int, default=4)

    sp = add("train-mel", cmd_train_mel, "train the mel-spectrogram CNN detector")
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--make-corpus", action="store_true", help="write the synthetic corpus first")
    sp.add_argument("--clips-per-label", type=int, default=50)

    sp = add("localize", cmd_localize, "estimate directions over 16-frame windows")
    sp.add_argument("--method", default="ssde")
    sp.add_argument("--wav")
    sp.add_argument("--hrtf")
    sp.add_argument("--model")
    sp.add_argument("--out")

    sp = add("detect", cmd_detect, "detect sound events")
    sp.add_argument("--wav")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = add("eval", cmd_eval, "run the virtual-source simulation")
    sp.add_argument("--model")
    sp.add_argument("--hrtf")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--snr-db", type=float, default=15.0)
    sp.add_argument("--noise", default="ambient")
    sp.add_argument("--direction-step", type=int, default=1)

    sp = add("report", cmd_report, "render a trial table as text and CSV")
    sp.add_argument("--trials")
    sp.add_argument("--out")
    return p, sub


def main(argv=None):
    parser, sub = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise CliError(EXIT_USAGE, "usage", "no subcommand given")
        if args.config:
            sp = sub.choices[args.command]
            defaults = {a.dest: a.default for a in sp._actions if a.dest not in ("help", "config")}
            apply_config(args, defaults, read_config(args.config))
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except FileNotFoundError as exc:
        code, kind, msg = EXIT_FILE, "file", str(exc)
    except FormatError as exc:
        code, kind, msg = EXIT_FILE, "format", str(exc)
    except CompatibilityError as exc:
        code, kind, msg = EXIT_COMPAT, "compatibility", str(exc)
    except OSError as exc:
        code, kind, msg = EXIT_FILE, "file", str(exc)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        code, kind, msg = EXIT_FAIL, type(exc).__name__, str(exc)
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
