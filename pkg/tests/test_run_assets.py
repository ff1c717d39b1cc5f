#!/usr/bin/env python3
"""
Test script to verify run directory management
"""

import os
import time
from datetime import datetime, timezone

from src.utils.load_env import load_env_file
from src.utils.run_assets_manager import RUN_MANIFEST, RunAssetsManager


def test_run_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LAPRAN_RUN_DIR", str(tmp_path / "from_env"))
    manager = RunAssetsManager()
    assert manager.runs_dir == str(tmp_path / "from_env")
    assert os.path.isdir(manager.runs_dir)


def test_run_ids_are_content_addressed():
    now = datetime(2024, 5, 6, 7, 8, 9, 123456, tzinfo=timezone.utc)
    assert RunAssetsManager.new_run_id("0123456789ab", now) == "0123456789ab-20240506T070809123456Z"


def test_create_and_list_runs(tmp_path):
    manager = RunAssetsManager(str(tmp_path))
    first = manager.create_run("aaaaaaaaaaaa", {"sensing": {"m": 4}})
    time.sleep(0.01)
    second = manager.create_run("aaaaaaaaaaaa", {})
    other = manager.create_run("bbbbbbbbbbbb", {})
    os.makedirs(tmp_path / "not-a-run")

    manifest = manager.read_manifest(first)
    assert manifest["config_hash"] == "aaaaaaaaaaaa"
    assert manifest["sensing"] == {"m": 4}
    assert "created" in manifest

    assert [r["path"] for r in manager.list_runs("aaaaaaaaaaaa")] == [second, first]
    assert len(manager.list_runs()) == 3
    assert manager.find_latest_run("aaaaaaaaaaaa") == second
    assert manager.find_latest_run("bbbbbbbbbbbb") == other
    assert manager.find_latest_run("cccccccccccc") is None


def test_stage_bookkeeping(tmp_path):
    manager = RunAssetsManager(str(tmp_path))
    run_dir = manager.create_run("aaaaaaaaaaaa", {})
    for stage in (1, 2):
        stage_dir = manager.stage_dir(run_dir, stage)
        os.makedirs(stage_dir)
        open(os.path.join(stage_dir, "weights.pt"), "wb").close()
    os.makedirs(manager.stage_dir(run_dir, 4))

    assert manager.trained_stages(run_dir) == [1, 2]
    manager.record_stages(run_dir, [2, 1])
    manager.record_stages(run_dir, [2])
    assert manager.read_manifest(run_dir)["stages_trained"] == [1, 2]


def test_cleanup_and_storage_usage(tmp_path):
    manager = RunAssetsManager(str(tmp_path))
    old = manager.create_run("aaaaaaaaaaaa", {})
    fresh = manager.create_run("bbbbbbbbbbbb", {})
    with open(os.path.join(fresh, "blob.bin"), "wb") as f:
        f.write(b"\0" * 2048)

    long_ago = time.time() - 40 * 24 * 60 * 60
    os.utime(old, (long_ago, long_ago))

    usage = manager.get_storage_usage()
    assert usage["total_runs"] == 2
    assert usage["total_size_bytes"] >= 2048

    assert manager.cleanup_old_runs(days_old=30) == 1
    assert not os.path.exists(old)
    assert os.path.exists(os.path.join(fresh, RUN_MANIFEST))


def test_env_file_does_not_override_existing_variables(tmp_path, monkeypatch):
    env_file = tmp_path / ".env"
    env_file.write_text("# local paths\nLAPRAN_RUN_DIR=\"custom_runs\"\nLAPRAN_DATA_DIR=cache\n")
    monkeypatch.delenv("LAPRAN_RUN_DIR", raising=False)
    monkeypatch.setenv("LAPRAN_DATA_DIR", "already_set")

    assert load_env_file(env_file) == 1
    assert os.environ["LAPRAN_RUN_DIR"] == "custom_runs"
    assert os.environ["LAPRAN_DATA_DIR"] == "already_set"


def test_env_defaults_without_file(tmp_path, monkeypatch):
    monkeypatch.delenv("LAPRAN_RUN_DIR", raising=False)
    monkeypatch.delenv("LAPRAN_DATA_DIR", raising=False)
    assert load_env_file(tmp_path / "missing.env") == 0
    assert os.environ["LAPRAN_RUN_DIR"] == "runs"
    assert os.environ["LAPRAN_DATA_DIR"] == "data"
