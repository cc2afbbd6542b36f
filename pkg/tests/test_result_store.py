import json
import os

import pytest

from analysis import heating_attribution, transmission_spectrum
from dynamics import HeatingBudget
from protocol import AtomRunResult, IntervalKind, IntervalRecord
from result_store import ResultWriter, RunManifest, read_manifest, read_results, write_manifest
from utils import mhz_to_angular, mk_to_joule


def _result(atom, value):
    probe = IntervalRecord(kind=IntervalKind.PROBE, start=5e-4, duration=1e-4, delta_c=mhz_to_angular(-8.0),
                           mean_transmission_rel=value * 1.7, mean_transmission=value,
                           mean_coupling=mhz_to_angular(11.0) * value, qualified=atom % 2 == 0,
                           present_duration=1e-4,
                           heating=HeatingBudget(1e-30 * value, 3e-31, 0.0, 0.0, 1e-32, -2e-31))
    cooling = IntervalRecord(kind=IntervalKind.COOLING, start=0.0, duration=5e-4, delta_c=0.0,
                             mean_transmission_rel=0.01, mean_transmission=0.01, mean_coupling=0.0,
                             present_duration=5e-4)
    return AtomRunResult(triggered=True, intervals=(cooling, probe), exit_time=5e-4,
                         heating_budget=probe.heating, loss_during_probe=False,
                         stark_at_antinode=mhz_to_angular(35.0), trap_depth_hold=mk_to_joule(1.6),
                         delta_c=mhz_to_angular(-8.0), atom_index=atom, flight_time=1.2e-3, steps=600000)


def test_writer_flushes_in_batches(tmp_path):
    path = str(tmp_path / 'results.jsonl')
    writer = ResultWriter(path, flush_every=2)
    writer.append(_result(0, 0.1))
    assert writer.get_stats()['pending'] == 1
    assert os.path.getsize(path) == 0
    writer.append(_result(1, 0.2))
    stats = writer.get_stats()
    assert stats['written'] == 2 and not stats['is_dirty']
    writer.append(_result(2, 0.3))
    assert writer.close()
    assert len(read_results(path)) == 3
    with pytest.raises(RuntimeError):
        writer.append(_result(3, 0.4))


def test_reanalysis_matches_in_process(tmp_path):
    """从存档重新读取后的分析与进程内分析逐位一致"""
    results = [_result(i, 0.1 + 0.037 * i) for i in range(9)]
    path = str(tmp_path / 'results.jsonl')
    with ResultWriter(path) as writer:
        for result in results:
            writer.append(result)
    restored = read_results(path)
    assert restored == results
    assert transmission_spectrum(restored, False) == transmission_spectrum(results, False)
    assert transmission_spectrum(restored, True) == transmission_spectrum(results, True)
    assert heating_attribution(restored) == heating_attribution(results)


def test_new_writer_truncates_old_archive(tmp_path):
    path = str(tmp_path / 'results.jsonl')
    with ResultWriter(path) as writer:
        writer.append(_result(0, 0.1))
    with ResultWriter(path):
        pass
    assert read_results(path) == []


def test_bad_lines_report_line_number(tmp_path):
    path = tmp_path / 'results.jsonl'
    good = json.dumps(_result(0, 0.1).to_dict())
    path.write_text(good + '\n{not json\n', encoding='utf-8')
    with pytest.raises(ValueError, match='第 2 行'):
        read_results(str(path))

    data = _result(0, 0.1).to_dict()
    data['schema_version'] = 0
    path.write_text(json.dumps(data) + '\n', encoding='utf-8')
    with pytest.raises(ValueError, match='第 1 行'):
        read_results(str(path))


def test_manifest_written_atomically(tmp_path):
    path = str(tmp_path / 'manifest.json')
    manifest = RunManifest(command='spectrum', config={'atoms': '3'}, master_seed=12345,
                           outputs=['spectrum.csv'], failed_tasks=[[0, 1, 2]], exit_code=0)
    assert write_manifest(path, manifest)
    data = read_manifest(path)
    assert data['master_seed'] == 12345
    assert data['config'] == {'atoms': '3'}
    assert data['failed_tasks'] == [[0, 1, 2]]
    assert data['schema_version'] == 1
    assert not [name for name in os.listdir(tmp_path) if name.startswith('.manifest_tmp_')]
