"""Silent articulatory video to speech: CTC recognition, VAE-TTS duration
modelling and duration-transplant synthesis."""

__version__ = "0.1.0"
