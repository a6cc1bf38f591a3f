import pytest

from helpers import check_silo_schedule
from memmarket.silo import HDD, SNAPSHOT_HEADER, Silo, SiloConfig, Where, zram
from memmarket.units import InvalidArgument, InvalidState


@pytest.mark.parametrize("seed", range(300))
def test_random_schedule_matches_model(seed):
    assert check_silo_schedule(seed) == []


def test_reaccess_within_cooling_never_reads_disk():
    s = Silo(SiloConfig(cooling_period=100, page_size=1))
    for p in range(10):
        s.swap_out(p, p)
    s.tick(100)
    assert all(s.access(p, 100).where is Where.SILO for p in range(10))
    assert s.disk_reads == 0


def test_cold_pages_are_written_out_and_cost_a_read():
    s = Silo(SiloConfig(cooling_period=10, backing=HDD, page_size=1))
    s.swap_out("a", 0)
    s.swap_out("b", 5)
    assert s.tick(12) == 1
    r = s.access("a", 12)
    assert r.where is Where.DISK and r.latency_us == HDD.read_latency_us
    assert s.locate("b") is Where.SILO
    assert s.access("zz", 12).where is Where.NOT_TRACKED


def test_prefetch_restores_most_recent_first():
    s = Silo(SiloConfig(cooling_period=1, page_size=4096))
    for p in range(6):
        s.swap_out(p, p)
    s.tick(100)
    assert s.prefetch(2 * 4096 + 100, now=100) == 2
    assert [p for p in range(6) if s.locate(p) is Where.SILO] == [4, 5]
    assert s.conserved()


def test_compressed_backing_footprint():
    s = Silo(SiloConfig(cooling_period=1, backing=zram(0.5), page_size=100))
    for p in range(4):
        s.swap_out(p, 0)
    s.tick(10)
    assert s.compressed_footprint() == 200
    assert s.harvestable_bytes(1000) == 800
    assert s.snapshot().csv_row().count(",") == SNAPSHOT_HEADER.count(",")


def test_errors():
    s = Silo()
    s.swap_out(1, 0)
    with pytest.raises(InvalidState):
        s.swap_out(1, 0)
    s.tick(10)
    with pytest.raises(InvalidArgument):
        s.tick(5)
