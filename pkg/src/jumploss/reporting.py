"""Run manifests and delimited-output helpers.

Every experiment run ends by writing `run_manifest.json` atomically
(temp file + rename in the output directory); a missing manifest means
the run crashed. The manifest echoes the effective config, records the
code version, the child-seed derivation, wall-clock time, a checksum per
output file, and any invariant warnings raised during the run, so a rerun
from the echoed config can be verified byte for byte against the
checksums.
"""

import csv
import hashlib
import json
import os
import tempfile

from . import __version__

MANIFEST_NAME = "run_manifest.json"

# explicit child-seed list is embedded up to this many trajectories;
# larger ensembles carry the derivation rule only
MAX_LISTED_SEEDS = 256


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def child_seed_table(master_seed, n_traj):
    """Seed derivation record: trajectory i draws from a fresh PCG64
    stream seeded by SeedSequence(entropy=master_seed, spawn_key=(i,))."""
    table = {
        "rule": "PCG64(SeedSequence(entropy=master_seed, spawn_key=(i,)))",
        "master_seed": int(master_seed),
        "n_traj": int(n_traj),
    }
    if n_traj <= MAX_LISTED_SEEDS:
        table["spawn_keys"] = [[i] for i in range(int(n_traj))]
    return table


def write_json_atomic(payload, path):
    """Serialize to a sibling temp file, then rename over `path`."""
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows):
    """Delimited output with full-precision floats (%.17g)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                f"{v:.17g}" if isinstance(v, float) else str(v) for v in row
            ])
    return path


def build_manifest(
    experiment,
    params,
    output_dir,
    files,
    wall_clock,
    warnings_log=(),
    seeds=None,
    summary=None,
):
    entries = []
    for name in sorted(files):
        full = os.path.join(output_dir, name)
        entries.append({
            "name": name,
            "bytes": os.path.getsize(full),
            "sha256": file_sha256(full),
        })
    manifest = {
        "experiment": experiment,
        "config": {
            k: params[k] for k in sorted(params)
        },
        "version": __version__,
        "wall_clock_seconds": round(float(wall_clock), 3),
        "files": entries,
        "invariant_log": list(warnings_log),
    }
    if seeds is not None:
        manifest["child_seeds"] = seeds
    if summary is not None:
        manifest["summary"] = summary
    return manifest


def write_manifest(manifest, output_dir):
    return write_json_atomic(
        manifest, os.path.join(output_dir, MANIFEST_NAME)
    )
