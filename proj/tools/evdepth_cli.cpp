#include <cstdio>
int main() { std::puts("evdepth: not wired yet"); return 0; }
