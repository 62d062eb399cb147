#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# bitleak documentation build configuration file
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os.path as op
import sys

# include parent directory
pdir = op.dirname(op.dirname(op.abspath(__file__)))
sys.path.insert(0, pdir)

sys.path.insert(0, op.join(pdir, "bitleak"))
from _version import version as bitleak_version  # noqa: E402

# Order class attributes and functions in separate blocks
autodoc_member_order = 'bysource'
autoclass_content = 'both'
autodoc_mock_imports = ['torch']

# -- General configuration ------------------------------------------------

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.autosummary',
              'sphinx.ext.intersphinx',
              'sphinx.ext.mathjax',
              'sphinx.ext.viewcode',
              'sphinx.ext.napoleon',
              ]

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

# General information about the project.
project = 'bitleak'
copyright = '2026, bitleak developers'
author = 'bitleak developers'

# The short X.Y version and the full version.
version = bitleak_version
release = version

language = None
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'
todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'bitleakdoc'

# -- Options for LaTeX output ---------------------------------------------

latex_documents = [
    (master_doc, 'bitleak.tex', 'bitleak Documentation',
     author, 'manual'),
]

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'bitleak', 'bitleak Documentation',
     [author], 1)
]

# Example configuration for intersphinx: refer to the Python standard library.
intersphinx_mapping = {
    "python": ('https://docs.python.org/', None),
    "numpy": ('https://numpy.org/doc/stable/', None),
    "scipy": ('https://docs.scipy.org/doc/scipy/reference/', None),
    "h5py": ('https://docs.h5py.org/en/stable/', None),
    "lmfit": ('https://lmfit.github.io/lmfit-py/', None),
    "sklearn": ('https://scikit-learn.org/stable/', None),
    "torch": ('https://pytorch.org/docs/stable/', None),
}
