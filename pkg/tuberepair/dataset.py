"""On-disk phantom sets and disconnection datasets.

Dataset layout::

    <root>/manifest.json
    <root>/volumes/<volume id>/volume.btv
    <root>/volumes/<volume id>/graph.json
    <root>/samples/<sample id>/disconnected.btv
    <root>/samples/<sample id>/meta.json
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from tuberepair.errors import StorageError, UsageError
from tuberepair.skeleton import export_graph_json, extract_graph, read_graph
from tuberepair.synth import (DisconnectionSample, PhantomParams, SynthConfig, assign_splits, generate_phantom_tree,
                              synthesize_volume)
from tuberepair.util import PathLike, atomic_write_bytes, map_ordered, read_json, write_json
from tuberepair.volume import VoxelCoord, read_volume, write_volume

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def config_echo(config) -> dict:
    """JSON ready dict of a (nested) config dataclass."""
    return dataclasses.asdict(config)


def ensure_empty_dir(path: PathLike, force: bool = False) -> Path:
    """Creates path; an existing non-empty directory is only accepted with force."""
    target = Path(path)
    if target.exists() and any(target.iterdir()) and not force:
        raise UsageError(f"output directory {target} is not empty, use --force to write into it")
    target.mkdir(parents=True, exist_ok=True)
    return target


# Phantom sets


def _write_phantom(job: Tuple[str, str, PhantomParams]) -> dict:
    out, phantom_id, params = job
    vol, graph = generate_phantom_tree(params)
    write_volume(vol, Path(out) / f"{phantom_id}.btv")
    atomic_write_bytes(Path(out) / f"{phantom_id}.json", export_graph_json(graph))
    logger.info("phantom %s: %d voxels, %d branches", phantom_id, vol.count(), len(graph.edges))
    return {"id": phantom_id, "seed": params.seed, "voxels": vol.count(), "branches": len(graph.edges)}


def write_phantom_set(out: PathLike, count: int, params: PhantomParams, jobs: int = 1,
                      force: bool = False) -> dict:
    """Writes count phantoms as <id>.btv and <id>.json; phantom i uses seed params.seed + i.

    Returns
    -------
    index: dict
        The phantoms.json document written next to them
    """
    if count < 1:
        raise UsageError(f"count must be positive, got {count}")
    target = ensure_empty_dir(out, force)
    jobs_list = [(str(target), f"phantom_{i:04d}", dataclasses.replace(params, seed=params.seed + i))
                 for i in range(count)]
    entries = map_ordered(_write_phantom, jobs_list, jobs)
    index = {"version": MANIFEST_VERSION, "seed": params.seed, "config": config_echo(params), "phantoms": entries}
    write_json(target / "phantoms.json", index)
    return index


def discover_volumes(directory: PathLike) -> List[Tuple[str, Path, Optional[Path]]]:
    """(id, volume path, graph path or None) for every .btv file of a directory, sorted by id."""
    root = Path(directory)
    if not root.is_dir():
        raise StorageError(f"volume directory {root} does not exist")
    found = []
    for path in sorted(root.glob("*.btv")):
        graph = path.with_suffix(".json")
        found.append((path.stem, path, graph if graph.exists() else None))
    if not found:
        raise UsageError(f"no .btv volumes in {root}")
    return found


# Datasets


def _sample_paths(sample_id: str) -> Tuple[str, str]:
    return f"samples/{sample_id}/disconnected.btv", f"samples/{sample_id}/meta.json"


def _synthesize_job(job: Tuple[str, str, str, Optional[str], str, SynthConfig, int]) -> dict:
    out, volume_id, volume_path, graph_path, split, config, volume_index = job
    root = Path(out)
    vol = read_volume(volume_path)
    graph = read_graph(graph_path) if graph_path else extract_graph(vol)[1]
    write_volume(vol, root / "volumes" / volume_id / "volume.btv")
    atomic_write_bytes(root / "volumes" / volume_id / "graph.json", export_graph_json(graph))
    samples, shortfall = synthesize_volume(volume_id, vol, graph, split, config, volume_index)
    records = []
    for sample in samples:
        volume_rel, meta_rel = _sample_paths(sample.sample_id)
        write_volume(sample.disconnected, root / volume_rel)
        record = dict(sample.scalars(), volume=volume_rel, meta=meta_rel)
        write_json(root / meta_rel, dict(record, seed=config.seed, config=config_echo(config)))
        records.append(record)
    logger.info("volume %s (%s): %d samples, shortfall %d", volume_id, split, len(samples), shortfall)
    return {"id": volume_id, "split": split, "volume": f"volumes/{volume_id}/volume.btv",
            "graph": f"volumes/{volume_id}/graph.json", "samples": records, "shortfall": shortfall}


def generate_dataset(volumes_dir: PathLike, out: PathLike, config: SynthConfig = SynthConfig(), jobs: int = 1,
                     force: bool = False) -> dict:
    """Synthesizes a dataset from every volume of a directory and writes it under out.

    Volumes without a graph JSON next to them get one extracted. Splits are assigned per volume. The work
    runs per volume, in a process pool when jobs > 1, and is collected in volume order so the manifest
    bytes never depend on scheduling.

    Returns
    -------
    manifest: dict
        The manifest.json document
    """
    sources = discover_volumes(volumes_dir)
    splits = assign_splits([s[0] for s in sources], config.split_ratio, config.seed)
    target = ensure_empty_dir(out, force)
    jobs_list = [(str(target), volume_id, str(path), str(graph) if graph else None, splits[volume_id], config, index)
                 for index, (volume_id, path, graph) in enumerate(sources)]
    results = map_ordered(_synthesize_job, jobs_list, jobs)
    samples = [record for result in results for record in result["samples"]]
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": config.seed,
        "config": config_echo(config),
        "splits": {name: [r["id"] for r in results if r["split"] == name] for name in ("train", "val", "test")},
        "volumes": [{k: v for k, v in r.items() if k != "samples"} for r in results],
        "samples": samples,
        "shortfall": sum(r["shortfall"] for r in results),
    }
    write_json(target / MANIFEST_NAME, manifest)
    counts = manifest_summary(manifest)
    logger.info("dataset %s: %s samples per split, shortfall %d", target, counts, manifest["shortfall"])
    return manifest


def sample_from_record(record: dict, root: Path) -> DisconnectionSample:
    try:
        return DisconnectionSample(
            sample_id=record["sample_id"],
            source_volume_id=record["source_volume_id"],
            edge_id=int(record["edge_id"]),
            kp1=VoxelCoord(*record["kp1"]),
            kp2=VoxelCoord(*record["kp2"]),
            kp1_index=int(record["kp1_index"]),
            kp2_index=int(record["kp2_index"]),
            gap_radius=float(record["gap_radius"]),
            disconnected=read_volume(root / record["volume"]),
            branch_mean_radius=float(record["branch_mean_radius"]),
            branch_volume_S=int(record["branch_volume_S"]),
            kp1_component_label=int(record["kp1_component_label"]),
            kp2_component_label=int(record["kp2_component_label"]),
            split=record["split"],
            fixed_crop_centers=tuple(VoxelCoord(*c) for c in record["fixed_crop_centers"]),
            removed_voxels=int(record.get("removed_voxels", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise StorageError(f"malformed sample record {record.get('sample_id', '?')}: {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    """A loaded manifest. Sample volumes are read lazily by load_sample."""
    root: Path
    manifest: dict
    prefix: str = ""

    @property
    def seed(self) -> int:
        return int(self.manifest.get("seed", 0))

    def records(self, split: Optional[str] = None) -> List[dict]:
        records = self.manifest.get("samples", [])
        return [r for r in records if split is None or r["split"] == split]

    def load_sample(self, record: dict) -> DisconnectionSample:
        sample = sample_from_record(record, self.root)
        if self.prefix:
            return dataclasses.replace(sample, sample_id=f"{self.prefix}{sample.sample_id}")
        return sample

    def load_split(self, split: str) -> List[DisconnectionSample]:
        return [self.load_sample(r) for r in self.records(split)]


def load_dataset(path: PathLike, prefix: str = "") -> Dataset:
    """Opens a dataset from its directory or its manifest.json path."""
    location = Path(path)
    manifest_path = location / MANIFEST_NAME if location.is_dir() else location
    try:
        manifest = read_json(manifest_path)
    except FileNotFoundError as exc:
        raise StorageError(f"no manifest at {manifest_path}") from exc
    except ValueError as exc:
        raise StorageError(f"manifest {manifest_path} is not valid JSON") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise StorageError(f"unsupported manifest {manifest_path}")
    return Dataset(manifest_path.parent, manifest, prefix)


def load_datasets(paths: Sequence[PathLike]) -> List[Dataset]:
    """Several manifests; with more than one, sample ids get the manifest index as prefix ("0:", "1:", ...)."""
    if len(paths) == 1:
        return [load_dataset(paths[0])]
    return [load_dataset(path, f"{index}:") for index, path in enumerate(paths)]


def collect_samples(datasets: Sequence[Dataset], split: str) -> List[DisconnectionSample]:
    return [sample for dataset in datasets for sample in dataset.load_split(split)]


def manifest_summary(manifest: dict) -> Dict[str, int]:
    """Sample count per split."""
    return {name: sum(1 for s in manifest.get("samples", []) if s["split"] == name) for name in ("train", "val", "test")}
