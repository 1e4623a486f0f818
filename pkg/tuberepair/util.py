from __future__ import annotations

import concurrent.futures as cf
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, List, Sequence, Union

PathLike = Union[str, "os.PathLike[str]"]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Writes payload to path through a temporary sibling file and a rename.

    Readers never observe a partially written artifact.

    Parameters
    ----------
    path: PathLike
        Destination file; parent directories are created.
    payload: bytes
        File content

    Returns
    -------
    path: Path
        The destination path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(document: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: PathLike, document: Any) -> Path:
    return atomic_write_text(path, dumps_json(document))


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def map_ordered(function: Callable[[Any], Any], items: Sequence[Any], jobs: int = 1) -> List[Any]:
    """Applies function to every item, in a process pool when jobs > 1; results keep the item order.

    Parameters
    ----------
    function: Callable[[Any], Any]
        Picklable top-level function
    items: Sequence[Any]
        Picklable arguments
    jobs: int
        Worker processes; 1 runs inline

    Returns
    -------
    results: List[Any]
    """
    if jobs <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with cf.ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(function, item) for item in items]
        return [future.result() for future in futures]
