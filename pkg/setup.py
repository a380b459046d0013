"""
Setup script for fashionkit.

    pip install -e .          installs the modules and the `fashionkit` command
    python setup.py check-deps   reports which runtime packages are importable
"""

import sys

from setuptools import setup

MODULES = [
    "annotation_io",
    "backbones",
    "checkpoint_io",
    "compatibility",
    "config_core",
    "evaluation",
    "fashion_data",
    "fashion_errors",
    "fashion_metrics",
    "fashionkit",
    "heads",
    "mask_ops",
    "model_zoo",
    "pipelines",
    "synthetic_data",
    "train_runner",
]

REQUIRED_PACKAGES = [
    ("numpy", "numpy"),
    ("opencv-python", "cv2"),
    ("torch", "torch"),
    ("scipy", "scipy"),
    ("matplotlib", "matplotlib"),
    ("PyYAML", "yaml"),
    ("requests", "requests"),
    ("pycocotools", "pycocotools"),
]


def check_dependencies():
    """Check if all required dependencies are installed"""
    print("Checking dependencies...")
    missing_packages = []
    for package_name, import_name in REQUIRED_PACKAGES:
        try:
            __import__(import_name)
            print(f"✓ {package_name} is installed")
        except ImportError:
            print(f"✗ {package_name} is missing")
            missing_packages.append(package_name)
    if missing_packages:
        print(f"\nMissing packages: {', '.join(missing_packages)}")
        print("Please install them using:")
        print("pip install -r requirements.txt")
        return False
    return True


if __name__ == "__main__" and sys.argv[1:] == ["check-deps"]:
    sys.exit(0 if check_dependencies() else 1)

setup(
    name="fashionkit",
    version="0.1.0",
    description="Config-driven visual fashion analysis toolkit",
    python_requires=">=3.8",
    py_modules=MODULES,
    install_requires=[
        "numpy>=1.20.0",
        "opencv-python>=4.5.0",
        "torch>=1.13.0",
        "scipy>=1.7.0",
        "matplotlib>=3.5.0",
        "PyYAML>=6.0",
        "requests>=2.25.0",
        "pycocotools>=2.0",
    ],
    extras_require={"test": ["pytest>=7.0", "flask>=2.0"]},
    entry_points={"console_scripts": ["fashionkit = fashionkit:main"]},
)
