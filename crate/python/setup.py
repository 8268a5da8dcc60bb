from setuptools import setup
from setuptools_rust import Binding, RustExtension

setup(
    rust_extensions=[
        RustExtension(
            "moe_cgan",
            path="../crates/python/Cargo.toml",
            binding=Binding.PyO3,
            debug=False,
        )
    ],
    py_modules=[],
    zip_safe=False,
)
