# Empty file is fine
