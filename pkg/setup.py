#!/usr/bin/env python3
"""
Bootstrap for kamtor: virtual environment, dependencies, .env and a config smoke check.
"""
import os
import shutil
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
VENV = ROOT / '.venv'
MIN_PYTHON = (3, 9)

SMOKE_CHECK = (
    "from pathlib import Path; "
    "from src.core.config_loader import ConfigLoader; "
    "names = sorted(p.name for p in Path('configs/examples').glob('*.yml')); "
    "[ConfigLoader().load_config(str(Path('configs/examples') / n)) for n in names]; "
    "print(f'{len(names)} example configs validated')"
)


def venv_python() -> str:
    scripts = 'Scripts' if sys.platform == "win32" else 'bin'
    exe = 'python.exe' if sys.platform == "win32" else 'python'
    return str(VENV / scripts / exe)


def run_step(label: str, cmd) -> bool:
    """Run one bootstrap command from the repository root."""
    print(f"🔧 {label}...")
    try:
        subprocess.run(cmd, check=True, cwd=ROOT)
    except (subprocess.CalledProcessError, OSError) as e:
        print(f"❌ {label} failed: {e}")
        return False
    print(f"✅ {label} done.")
    return True


def check_python_version() -> bool:
    if sys.version_info < MIN_PYTHON:
        print(f"❌ Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]} or higher is required (numpy/scipy wheels).")
        return False
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor} detected.")
    return True


def create_venv() -> bool:
    if VENV.exists():
        print("✅ Virtual environment already exists.")
        return True
    return run_step("Creating virtual environment", [sys.executable, '-m', 'venv', str(VENV)])


def install_dependencies() -> bool:
    return run_step("Installing numpy, scipy, pandas and the config stack",
                    [venv_python(), '-m', 'pip', 'install', '-r', 'requirements.txt'])


def setup_env_file() -> None:
    """Copy env.example to .env so KAMTOR_THREADS is picked up by load_dotenv()."""
    env_file, env_example = ROOT / '.env', ROOT / 'env.example'
    if env_file.exists():
        print("✅ .env file already exists.")
    elif env_example.exists():
        shutil.copy(env_example, env_file)
        print("📝 .env created from env.example. Set KAMTOR_THREADS to your core count.")
    else:
        print("⚠️ env.example not found; worker threads default to 1.")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if var not in os.environ:
            print(f"ℹ️ {var} is unset; BLAS may oversubscribe when KAMTOR_THREADS > 1.")


def main():
    print("🚀 Setting up kamtor...")
    print("=" * 50)

    if not (check_python_version() and create_venv() and install_dependencies()):
        sys.exit(1)
    setup_env_file()
    if not run_step("Validating example configs", [venv_python(), '-c', SMOKE_CHECK]):
        sys.exit(1)

    print("\n🎉 Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Solve:   python3 run_kamtor.py solve --config configs/examples/reference_solve.yml --out report.json")
    print("2. Measure: python3 run_kamtor.py measure --config configs/examples/reference_measure.yml "
          "--sweep gamma=1e-3:1e-1:8 --out measure.json")
    print("3. Tests:   python3 run_tests.py")


def read_requirements() -> list:
    lines = (ROOT / 'requirements.txt').read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith('#') and 'pytest' not in ln]


if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Invoked by pip/setuptools with a build command: act as the package manifest.
        from setuptools import find_packages, setup
        setup(
            name='kamtor',
            version='0.1.0',
            python_requires='>=3.9',
            packages=find_packages(include=['src', 'src.*']),
            install_requires=read_requirements(),
        )
    else:
        main()
