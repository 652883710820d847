import pytest

from alnmil.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate(root, SynthConfig(n_patients=12, slide_size=160, tile_size=32, seed=11))
    return root


def write_config(path, data_dir, mode="dlcnbc-ws", epochs=3, extra=""):
    masks = f'masks_dir = "{data_dir / "masks"}"\n' if mode != "dlcnbc-ws" else ""
    path.write_text(
        f'slides_dir = "{data_dir / "slides"}"\n'
        f'clinical_csv = "{data_dir / "clinical.csv"}"\n'
        f"{masks}"
        f'mode = "{mode}"\n'
        "tile_size = 32\nout_size = 8\nfeat_dim = 4\nattn_dim = 4\nn_instances = 4\nbags_per_slide = 2\n"
        f"{extra}"
        f"[train]\nepochs = {epochs}\nbase_lr = 0.001\n"
    )
    return path


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}
N_CRITERIA = 10


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
