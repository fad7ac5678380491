# correspondence_transfer/__main__.py

from .cli import app

app(prog_name="correspondence_transfer")
