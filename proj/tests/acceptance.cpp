// placeholder until the acceptance suite lands
#include <cstdio>
int main() {
  std::printf("acceptance suite not yet implemented\n");
  return 1;
}
