#include <cstdio>

int main() {
    std::puts("ddlab: under construction");
    return 0;
}
