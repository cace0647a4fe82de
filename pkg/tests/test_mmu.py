import pytest

from memsim.hardware.kernel import TRAMPOLINE_VADDR, USER_SMALL_BASE
from memsim.hardware.memory import HUGE_PAGE_SIZE, PAGE_SIZE
from memsim.hardware.mmu import FaultReason, Intent, LevelClass, PageFault, Privilege, RegionStatus, canonical
from memsim.schemas.machine import IsolationMode


@pytest.fixture
def page(cpu):
    return cpu.alloc(PAGE_SIZE)


def prefetch_class(machine, cpu, vaddr: int) -> LevelClass:
    return machine.mmu.prefetch(vaddr, cpu.root, cpu.core)[1]


def test_canonical():
    assert canonical(0x0000_8000_0000_0000) == 0xFFFF_8000_0000_0000
    assert canonical(0x0000_7FFF_FFFF_F000) == 0x0000_7FFF_FFFF_F000


def test_translate_matches_pagemap(machine, cpu, page):
    paddr = machine.mmu.translate(page + 0x123, cpu.root, cpu.core).paddr

    assert page == USER_SMALL_BASE
    assert paddr == cpu.pagemap(page) + 0x123


def test_second_translation_hits_tlb(machine, cpu, page):
    mmu = machine.mmu
    first = mmu.translate(page, cpu.root, cpu.core)
    second = mmu.translate(page, cpu.root, cpu.core)

    assert not first.tlb_hit
    assert second.tlb_hit
    assert second.latency == machine.config.latency.tlb_hit


def test_prefetch_classes(machine, cpu, page):
    latencies = machine.config.prefetch_latency

    assert prefetch_class(machine, cpu, page) == LevelClass.VALID_UNCACHED
    cpu.read(page)
    assert machine.mmu.prefetch(page, cpu.root, cpu.core) == (latencies.cached, LevelClass.CACHED)
    assert prefetch_class(machine, cpu, page + PAGE_SIZE) == LevelClass.PTE_ABSENT
    assert prefetch_class(machine, cpu, page + HUGE_PAGE_SIZE) == LevelClass.PT_INVALID
    assert prefetch_class(machine, cpu, page + (1 << 30)) == LevelClass.PD_ABSENT
    assert prefetch_class(machine, cpu, page + (1 << 39)) == LevelClass.PDPT_ABSENT


def test_prefetch_of_unmapped_address_does_not_fault(machine, cpu):
    cpu.prefetch(0x6000_0000_0000)

    assert cpu.counters.page_faults == 0
    assert machine.events[-1].detail == LevelClass.PDPT_ABSENT.name


def test_user_cannot_read_direct_map(machine, cpu, page):
    alias = machine.config.kernel.direct_map_base + cpu.pagemap(page)

    with pytest.raises(PageFault) as error:
        cpu.read(alias)

    assert error.value.reason == FaultReason.PRIVILEGE
    assert cpu.counters.page_faults == 1


def test_kernel_reads_direct_map(machine, cpu, page):
    machine.poke(cpu.actor, page, b"\x2a")
    alias = machine.config.kernel.direct_map_base + cpu.pagemap(page)

    translation = machine.mmu.translate(alias, cpu.actor.space.kernel_root, cpu.core, Privilege.KERNEL)

    assert translation.page_size == HUGE_PAGE_SIZE
    assert machine.memory.read_byte(translation.paddr) == 0x2a


def test_unmapped_access_faults(cpu):
    with pytest.raises(PageFault) as error:
        cpu.read(USER_SMALL_BASE + 64 * PAGE_SIZE)

    assert error.value.reason == FaultReason.NOT_PRESENT


def test_read_only_page_rejects_write(cpu):
    vaddr = cpu.alloc(PAGE_SIZE, writable=False)

    with pytest.raises(PageFault) as error:
        cpu.write(vaddr, 1)

    assert error.value.reason == FaultReason.WRITE_PROTECT


def test_data_page_is_not_executable(machine, cpu, page):
    with pytest.raises(PageFault) as error:
        machine.mmu.translate(page, cpu.root, cpu.core, intent=Intent.EXEC)

    assert error.value.reason == FaultReason.NO_EXECUTE


def test_isolation_hides_direct_map(machine, cpu, page):
    alias = machine.config.kernel.direct_map_base + cpu.pagemap(page)
    assert prefetch_class(machine, cpu, alias) in (LevelClass.CACHED, LevelClass.VALID_UNCACHED)

    machine.set_isolation(IsolationMode.STRONGER_KERNEL_ISOLATION)

    assert prefetch_class(machine, cpu, alias) == LevelClass.PDPT_ABSENT
    assert machine.kernel.trampoline_mapped(cpu.actor.space)
    assert machine.mmu.walk(cpu.root, TRAMPOLINE_VADDR).paddr == machine.kernel.trampoline_frame


def test_isolation_keeps_user_mappings_in_kernel_root(machine, cpu, page):
    machine.set_isolation(IsolationMode.STRONGER_KERNEL_ISOLATION)
    space = cpu.actor.space

    assert space.kernel_root != space.user_root
    assert machine.mmu.walk(space.kernel_root, page).paddr == cpu.pagemap(page)


def test_region_status(machine, cpu, page):
    mmu = machine.mmu
    root = cpu.root

    assert mmu.region_status(root, 1, page) == RegionStatus.PAGE
    assert mmu.region_status(root, 2, page) == RegionStatus.TABLE
    assert mmu.region_status(root, 2, page + HUGE_PAGE_SIZE) == RegionStatus.INVALID
    huge = cpu.alloc(HUGE_PAGE_SIZE, huge=True)
    assert mmu.region_status(root, 2, huge) == RegionStatus.PAGE
