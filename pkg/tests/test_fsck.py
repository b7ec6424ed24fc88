import pytest

from dds_sim.blockdev import BlockDevice
from dds_sim.cli import main
from dds_sim.errors import DDSError, Status
from dds_sim.fsck import check, check_image

from stack import MiB, Stack


def populated():
    s = Stack(capacity=MiB, segment=4096)
    h, g = s.file("a")
    s.lib.write_file(h, 0, b"x" * 9000)
    s.run(g)
    h2, _ = s.file("b", group=g)
    s.lib.write_file(h2, 0, b"y" * 100)
    s.run(g)
    s.fs.persist_metadata()
    return s


def test_clean_image(tmp_path):
    s = populated()
    path = tmp_path / "img"
    s.device.save_image(path)
    info = check_image(path)
    assert info["problems"] == []
    assert main(["fsck", str(path)]) == 0


def test_double_owned_segment(tmp_path, capsys):
    s = populated()
    files = list(s.fs.files.values())
    files[1].segments = [files[0].segments[0]]
    s.fs.persist_metadata()
    path = tmp_path / "img"
    s.device.save_image(path)
    assert any("owned by files" in p for p in check_image(path)["problems"])
    assert main(["fsck", str(path)]) == 1


def test_leaked_segment():
    s = populated()
    s.fs.alloc.allocate()
    s.fs.persist_metadata()
    assert any("belong to no file" in p for p in check(s.device)["problems"])


def test_unformatted_device(tmp_path):
    dev = BlockDevice(4 * MiB)
    with pytest.raises(DDSError) as e:
        check(dev)
    assert e.value.status is Status.CORRUPT_METADATA
    path = tmp_path / "blank"
    dev.save_image(path)
    assert main(["fsck", str(path)]) == 2
    assert main(["fsck", str(tmp_path / "missing")]) == 2
