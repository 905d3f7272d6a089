"""Two-photon interference analysis between remote solid-state emitters:
coincidence models, a tag-stream simulator, the analysis pipeline and
simulation-based inference of the photon indistinguishability."""

__version__ = "0.1.0"
