# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Project information -----------------------------------------------------

import datetime
import importlib

_mod = importlib.import_module("silagedtp")


project = "silagedtp"
copyright = f"{datetime.date.today().year}, silagedtp developers"
author = "silagedtp developers"
release = _mod.__version__

extensions = [
    "numpydoc",
    "sphinxcontrib.apidoc",
]

apidoc_module_dir = "../silagedtp"
apidoc_output_dir = "api"
apidoc_separate_modules = True
apidoc_excluded_paths = ["cli.py"]
autodoc_default_options = {
    "members": True,
    "member-order": "bysource",
    "undoc-members": True,
}
autodoc_typehints = "description"

templates_path = ["_templates"]
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
html_theme = "sphinx_rtd_theme"

numpydoc_show_class_members = False
