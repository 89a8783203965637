// Placeholder main; replaced by the full pipeline CLI.
int main() { return 0; }
