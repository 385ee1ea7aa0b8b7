#include "cdmamba/tensor.hpp"

namespace cdmamba {

namespace {
bool g_checked = true;
}

bool checked_mode() { return g_checked; }
void set_checked_mode(bool on) { g_checked = on; }

}  // namespace cdmamba
