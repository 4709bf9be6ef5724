import re

from setuptools import setup


version = ''
with open('protomem/__init__.py') as f:
    version = re.search(r'^__version__\s*=\s*[\'"]([^\'"]*)[\'"]', f.read(), re.MULTILINE).group(1)

if not version:
    raise RuntimeError('Version is not set')

setup(
    name='protomem',
    packages=['protomem'],
    version=version,
    description='Transformer captioning with attention over prototype memories clustered from past activations.',
    author='protomem contributors',
    entry_points={'console_scripts': ['protomem = protomem.__main__:main']},
    keywords=['attention', 'transformer', 'memory', 'captioning', 'k-means'],
    include_package_data=True,
    python_requires='>=3.9',
    install_requires=['numpy>=1.22'],
    extras_require={'docs': ['sphinx',
                             'pygments',
                             'guzzle_sphinx_theme',
                             'enum_tools',
                             'sphinx_toolbox'],
                    'development': ['pylint',
                                    'flake8',
                                    'pytest']}
)
