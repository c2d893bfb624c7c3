#include <cstdio>

int main() {
    std::puts("sshield CLI: not wired up yet");
    return 1;
}
