"""Offline consistency check of a saved device image."""
from __future__ import annotations

from dds_sim.blockdev import BlockDevice
from dds_sim.errors import DDSError, Status
from dds_sim.fileservice import _IMG_HEAD, _IMG_MAGIC, _META_MAGIC, _SUPER, FileService

BLOCK_SIZE = 512


def _segment_size(device: BlockDevice) -> int:
    """Recover the segment size from the active metadata copy."""
    magic, _ver, active, _gen, _len = _SUPER.unpack(device.read_sync(0, _SUPER.size))
    if magic != _META_MAGIC:
        raise DDSError(Status.CORRUPT_METADATA, "no superblock")
    if active == 0:
        head = device.read_sync(BLOCK_SIZE, _IMG_HEAD.size)
        if head[:8] == _IMG_MAGIC:
            return _IMG_HEAD.unpack(head)[2]
        raise DDSError(Status.CORRUPT_METADATA, "active copy 0 has no image")
    size = 2 * BLOCK_SIZE
    while size <= device.capacity:
        if device.capacity % size == 0:
            head = device.read_sync(size // 2, _IMG_HEAD.size)
            if head[:8] == _IMG_MAGIC and _IMG_HEAD.unpack(head)[2] == size:
                return size
        size *= 2
    raise DDSError(Status.CORRUPT_METADATA, "active copy 1 not found at any segment size")


def check(device: BlockDevice) -> dict:
    """Load metadata and cross-check files against the segment bitmap.

    Returns the metadata description plus a ``problems`` list; raises
    ``DDSError(CORRUPT_METADATA)`` if the metadata cannot be read at all.
    """
    fs = FileService(device, _segment_size(device))
    fs.load_metadata()
    info = fs.describe()
    problems = []
    owner: dict[int, int] = {}
    seg = fs.segment_size
    for f in fs.files.values():
        if f.dir_id not in fs.dirs:
            problems.append(f"file {f.file_id} is in missing directory {f.dir_id}")
        if f.size > len(f.segments) * seg:
            problems.append(f"file {f.file_id} size {f.size} exceeds its {len(f.segments)} segments")
        for s in f.segments:
            if s in owner:
                problems.append(f"segment {s} owned by files {owner[s]} and {f.file_id}")
            owner[s] = f.file_id
            if s == 0 or s >= fs.alloc.total:
                problems.append(f"file {f.file_id} references invalid segment {s}")
            elif not fs.alloc.is_allocated(s):
                problems.append(f"file {f.file_id} references free segment {s}")
    leaked = fs.alloc.used - len(owner)
    if leaked > 0:
        problems.append(f"{leaked} allocated segments belong to no file")
    info["problems"] = problems
    return info


def check_image(path) -> dict:
    return check(BlockDevice.from_image(path, BLOCK_SIZE))
