#!/usr/bin/env python3
"""
Quick setup script for the class-incremental adapter toolkit
"""

import subprocess
from pathlib import Path


def run_command(cmd, description):
    """Run a command and show progress"""
    print(f"🔄 {description}...")
    try:
        subprocess.run(cmd, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {description} completed")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ {description} failed: {e.stderr}")
        return False


def main():
    print("🧪 cilkit Quick Setup")
    print("=" * 40)

    # Check if .env file exists
    if not Path(".env").exists():
        print("⚠️  .env file not found. Copying from .env.example...")
        if Path(".env.example").exists():
            run_command("cp .env.example .env", "Creating .env file")
        else:
            print("❌ .env.example not found!")
            return

    # Install Python dependencies
    if not run_command("pip install -r requirements.txt", "Installing Python dependencies"):
        return

    # Fast test suite
    if not run_command("python -m pytest -q", "Running the test suite"):
        print("⚠️  Tests failed - check the output of 'python -m pytest' before running experiments")
        return

    # Pre-train the shared backbone once so later runs can reuse it
    if run_command(
        "python manage.py pretrain --config configs/default.yaml --output runs/backbone",
        "Pre-training the backbone",
    ):
        print("✅ Backbone saved to runs/backbone (set backbone_checkpoint in your config to reuse it)")

    print("\n🎉 Setup completed!")
    print("\nNext steps:")
    print("1. Review configs/default.yaml")
    print("2. Run an experiment: python manage.py run --config configs/default.yaml")
    print("3. Plot it: python manage.py plot runs/default/report.json")

    print("\nStudy commands:")
    print("- python manage.py ablation --config configs/default.yaml")
    print("- python manage.py orth-variants --config configs/default.yaml")
    print("- python manage.py sweep --config configs/default.yaml")
    print("- python manage.py pilot --config configs/default.yaml")


if __name__ == "__main__":
    import sys

    # Build backends (pip/setuptools) invoke this file with a command argument;
    # packaging metadata lives in pyproject.toml. Plain `python setup.py` runs
    # the quick-setup steps above.
    if len(sys.argv) > 1:
        from setuptools import setup

        setup()
    else:
        main()
