from __future__ import annotations

# wmdl documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.

import wmdl

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.viewcode",
    "sphinx.ext.mathjax",
    "numpydoc",
]

# Generate the API documentation when building
autosummary_generate = True
numpydoc_show_class_members = False

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "wmdl"
copyright = "2026, the wmdl developers"
author = "the wmdl developers"

# The short X.Y version.
version = wmdl.__version__
# The full version, including alpha/beta/rc tags.
release = version

language = "en"
exclude_patterns: list[str] = []
pygments_style = "sphinx"
todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"
html_static_path = ["_static"]
htmlhelp_basename = "wmdldoc"

# -- Options for LaTeX output ---------------------------------------------

latex_elements: dict[str, str] = {}
latex_documents = [
    (master_doc, "wmdl.tex", "wmdl Documentation", author, "manual"),
]

# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "wmdl", "wmdl Documentation", [author], 1)]

# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (
        master_doc,
        "wmdl",
        "wmdl Documentation",
        author,
        "wmdl",
        "Treatment effect estimation fusing multiple data sources.",
        "Miscellaneous",
    ),
]
