"""
Utility functions shared by the fusion and tracking pipeline.
"""
import os
import json
import logging
from typing import Any, Dict, Iterable, Iterator, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_level: str, log_file_path: Optional[str] = None) -> None:
    """
    Configure the root logger for a command-line run.

    Args:
        log_level: Level name such as "INFO" or "DEBUG"
        log_file_path: Optional file that receives a copy of every record
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file_path:
        os.makedirs(os.path.dirname(log_file_path) or ".", exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file_path, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )

    # Silence noisy libraries
    for noisy in ("streamlit", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def flush_logging() -> None:
    """Flush and close every handler attached to the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        try:
            handler.flush()
            handler.close()
        except Exception:  # pragma: no cover - best effort on shutdown
            pass


def wrap_angle(angle):
    """
    Wrap an angle (scalar or array) to (-pi, pi].

    Args:
        angle: Angle(s) in radians

    Returns:
        Wrapped angle(s), same shape as the input
    """
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotation_2d(theta: float) -> np.ndarray:
    """Counter-clockwise planar rotation matrix."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def resolve_thread_count(requested: int, n_tasks: int) -> int:
    """
    Resolve the intra-frame worker count.

    Args:
        requested: Configured cap; 0 means automatic
        n_tasks: Number of independent work units (cameras)

    Returns:
        Worker count, at least 1
    """
    if requested < 0:
        raise ValueError(f"thread count must be >= 0, got {requested}")
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, max(n_tasks, 1)))


def write_jsonl(records: Iterable[Dict[str, Any]], path: str) -> int:
    """
    Write records as JSON lines.

    Args:
        records: Iterable of JSON-serializable dictionaries
        path: Output file path

    Returns:
        Number of lines written
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, separators=(',', ':')))
            f.write("\n")
            count += 1
    logger.info(f"Wrote {count} lines to {path}")
    return count


def read_jsonl(path: str) -> Iterator[Dict[str, Any]]:
    """Yield one dictionary per non-empty line of a JSON-lines file."""
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: invalid JSON ({e})") from e


def save_text(content: str, path: str) -> str:
    """
    Save a text document (SVG, HTML) to disk.

    Args:
        content: Document content
        path: Destination path

    Returns:
        The path written
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(content)
    logger.info(f"Saved {path}")
    return path


def round_floats(value: Any, digits: int = 6) -> Any:
    """Round floats (recursively in lists/dicts) for stable log output."""
    if isinstance(value, float):
        return round(value, digits)
    if isinstance(value, (list, tuple)):
        return [round_floats(v, digits) for v in value]
    if isinstance(value, dict):
        return {k: round_floats(v, digits) for k, v in value.items()}
    return value


def format_duration(seconds: float) -> str:
    """
    Format a duration as a readable string.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted string (e.g., "12.3 ms" or "1.25 s")
    """
    if seconds < 1.0:
        return f"{seconds * 1000.0:.1f} ms"
    if seconds < 120.0:
        return f"{seconds:.2f} s"
    minutes, rem = divmod(int(seconds), 60)
    return f"{minutes} min {rem} s"
