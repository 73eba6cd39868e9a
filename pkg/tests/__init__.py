"""Tests pour choucroute-cosmique."""
