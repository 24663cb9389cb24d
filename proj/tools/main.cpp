// Placeholder entry point; subcommands land once the training stack exists.
int main() { return 0; }
