"""
Build script for the stochastic-kg command-line executable
Uses PyInstaller to bundle cli.py with numpy and PyYAML into a single file
"""

import os
import platform
import shutil
import sys

APP_NAME = "stochastic-kg"
ENTRY_POINT = "cli.py"
ARCHITECTURES = ("universal2", "x86_64", "arm64")
# Library modules imported by the CLI at runtime
LIBRARY_MODULES = ("checks", "config", "density", "errors", "spacetime", "stochastic", "wavefunction")


def get_platform_spec():
    """Detects the current operating system"""
    system = platform.system()
    if system == "Darwin":
        return "macos"
    elif system == "Windows":
        return "windows"
    elif system == "Linux":
        return "linux"
    return "unknown"


def clean_build():
    """Removes previous build artifacts"""
    for dir_name in ("build", "dist"):
        if os.path.exists(dir_name):
            print(f"Cleaning {dir_name}...")
            shutil.rmtree(dir_name)

    spec_file = f"{APP_NAME}.spec"
    if os.path.exists(spec_file):
        os.remove(spec_file)


def build_app(target_arch=None):
    """
    Builds the console executable

    Args:
        target_arch: macOS only; one of 'universal2', 'x86_64', 'arm64'.
                     Default None builds for the running architecture.
    """
    plat = get_platform_spec()
    arch_info = f" ({target_arch})" if target_arch else ""
    print(f"Building {APP_NAME} for {plat}{arch_info}...")

    args = [
        f"--name={APP_NAME}",
        "--console",
        "--onefile",
        "--clean",
        "--hidden-import=numpy",
        "--hidden-import=yaml",
        *(f"--hidden-import={name}" for name in LIBRARY_MODULES),
        "--exclude-module=matplotlib",
        "--exclude-module=scipy",
        "--exclude-module=PIL",
        "--exclude-module=tkinter",
        "--exclude-module=pytest",
        "--exclude-module=hypothesis",
        ENTRY_POINT,
    ]

    if plat == "macos" and target_arch:
        args.append(f"--target-arch={target_arch}")
        print(f"  -> Building for architecture: {target_arch}")

    import PyInstaller.__main__
    PyInstaller.__main__.run(args)

    suffix = ".exe" if plat == "windows" else ""
    print("\n[OK] Build completed!")
    print(f"  -> dist/{APP_NAME}{suffix}")


def check_venv():
    """Warns when not running inside a virtual environment"""
    in_venv = hasattr(sys, "real_prefix") or (
        hasattr(sys, "base_prefix") and sys.base_prefix != sys.prefix
    )
    if in_venv:
        print("[OK] Running in virtual environment\n")
        return
    print("[WARNING] Script is not running in a virtual environment!")
    print("   Recommended: use build.sh")
    print()
    if os.getenv("CI"):
        return
    response = input("Continue anyway? (y/N): ")
    if response.lower() not in ("y", "yes"):
        print("Build cancelled.")
        sys.exit(0)
    print()


def main():
    print(f"=== {APP_NAME} Builder ===\n")
    check_venv()

    try:
        import PyInstaller  # noqa: F401
    except ImportError:
        print("[ERROR] PyInstaller is not installed.")
        print("   Install it with: pip install -r requirements-build.txt")
        sys.exit(1)

    target_arch = None
    if len(sys.argv) > 1:
        arg = sys.argv[1]
        if arg in ("--arch", "-a") and len(sys.argv) > 2:
            target_arch = sys.argv[2]
        elif arg in ARCHITECTURES:
            target_arch = arg

    clean_build()
    build_app(target_arch)
    print("\n=== [SUCCESS] Build successful! ===")


if __name__ == "__main__":
    main()
