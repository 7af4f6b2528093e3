# Sphinx configuration for fairex.kit.
#
# Built-in configuration values:
# https://www.sphinx-doc.org/en/master/usage/configuration.html


import os
import sys
_HERE = os.path.dirname(__file__)
sys.path.insert(0, os.path.abspath(os.path.join(_HERE, '../src')))

import fairex.kit

# -- Project information -----------------------------------------------------

project = 'fairex.kit'
copyright = '2024, fairex developers'
author = 'fairex developers'
release = '0.1.0'

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',  # numpy-style "Parameters:" sections
    'sphinx.ext.doctest',
    'sphinx.ext.autosummary',
]

autosummary_generate = True
autodoc_member_order = 'bysource'
napoleon_google_docstring = False
napoleon_numpy_docstring = True
templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']
html_theme_options = {'navigation_depth': 3}
