#!/usr/bin/env python3
"""
Setup script for MCRC tree crown delineation
"""

import subprocess
import sys


def install_requirements():
    """Install required packages"""
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✅ Dependencies installed successfully!")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Failed to install dependencies: {e}")
        return False


def main():
    """Main setup function"""
    print("Setting up MCRC tree crown delineation...")

    if install_requirements():
        print("\n🎉 Setup completed successfully!")
        print("\nTo try it on a synthetic plot:")
        print("python cli.py synth --out runs/plot --n-canopy 20")
        print("python cli.py segment --cloud runs/plot/cloud.csv --out runs/seg")
        print("python cli.py validate --truth runs/plot/truth.csv --trees runs/seg/segmentation_trees.csv --out runs/val")
        print("\nTo run the tests:")
        print("pytest")
    else:
        print("\n❌ Setup failed. Please install dependencies manually:")
        print("pip install -r requirements.txt")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Invoked by a build backend (egg_info, bdist_wheel, ...): metadata lives in pyproject.toml
        from setuptools import setup
        setup()
    else:
        main()
